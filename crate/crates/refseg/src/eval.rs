//! Evaluation: largest-score selection per sample, detection precision at
//! IoU > 0.5, mask IoU, response/caption losses and caption exact match.

use crate::data::ReferringSample;
use crate::error::Result;
use crate::head::{box_iou, mask_iou, BBox};
use crate::imgio::write_pgm;
use crate::lang::Vocabulary;
use crate::model::Network;
use crate::scalar::Scalar;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct SampleEval {
    pub id: String,
    pub score: f64,
    pub bbox: BBox,
    pub box_iou: f64,
    pub hit: bool,
    pub mask_iou: f64,
    pub res_loss: f64,
    pub cap_loss: f64,
    pub caption: Vec<String>,
    pub exact: bool,
    /// Where the predicted mask PGM was written, or "-" when not dumped.
    pub mask_path: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    /// Fraction of samples whose predicted box exceeds IoU 0.5 with the truth.
    pub precision: f64,
    pub mean_mask_iou: f64,
    pub mean_res_loss: f64,
    pub mean_cap_loss: f64,
    pub caption_exact: f64,
}

pub fn aggregate(evals: &[SampleEval]) -> MetricsReport {
    let n = evals.len();
    if n == 0 {
        return MetricsReport::default();
    }
    let nf = n as f64;
    MetricsReport {
        n,
        precision: evals.iter().filter(|e| e.hit).count() as f64 / nf,
        mean_mask_iou: evals.iter().map(|e| e.mask_iou).sum::<f64>() / nf,
        mean_res_loss: evals.iter().map(|e| e.res_loss).sum::<f64>() / nf,
        mean_cap_loss: evals.iter().map(|e| e.cap_loss).sum::<f64>() / nf,
        caption_exact: evals.iter().filter(|e| e.exact).count() as f64 / nf,
    }
}

pub fn evaluate_detailed<T: Scalar>(
    net: &Network<T>,
    samples: &[ReferringSample],
    vocab: &Vocabulary,
    mask_dir: Option<&Path>,
) -> Result<(MetricsReport, Vec<SampleEval>)> {
    if let Some(dir) = mask_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut evals = Vec::with_capacity(samples.len());
    for s in samples {
        let inf = net.infer_sample(s)?;
        let biou = box_iou(&inf.detection.bbox, &s.gt_box);
        let pred_mask = inf.detection.mask_image(s.image.width, s.image.height);
        let miou = mask_iou(&pred_mask, &s.mask);
        let exact = inf.caption == s.tokens;
        let mask_path = match mask_dir {
            Some(dir) => {
                let p = dir.join(format!("{}.pgm", s.id));
                write_pgm(&p, &pred_mask)?;
                p.display().to_string()
            }
            None => "-".to_string(),
        };
        evals.push(SampleEval {
            id: s.id.clone(),
            score: inf.detection.score,
            bbox: inf.detection.bbox,
            box_iou: biou,
            hit: biou > 0.5,
            mask_iou: miou,
            res_loss: inf.res_loss,
            cap_loss: inf.cap_loss,
            caption: vocab.decode(&inf.caption),
            exact,
            mask_path,
        });
    }
    Ok((aggregate(&evals), evals))
}

pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    samples: &[ReferringSample],
    vocab: &Vocabulary,
) -> Result<MetricsReport> {
    Ok(evaluate_detailed(net, samples, vocab, None)?.0)
}

/// Line-delimited per-sample records followed by a summary block.
pub fn render_report(report: &MetricsReport, evals: &[SampleEval]) -> String {
    let mut s = String::from(
        "id\tscore\tx0\ty0\tx1\ty1\tbox_iou\thit\tmask_iou\tres_loss\tcap_loss\tcaption\texact\tmask_path\n",
    );
    for e in evals {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.6}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            e.id,
            e.score,
            e.bbox.x0,
            e.bbox.y0,
            e.bbox.x1,
            e.bbox.y1,
            e.box_iou,
            e.hit as u8,
            e.mask_iou,
            e.res_loss,
            e.cap_loss,
            e.caption.join(" "),
            e.exact as u8,
            e.mask_path
        );
    }
    let _ = writeln!(s, "# samples           {}", report.n);
    let _ = writeln!(s, "# precision@0.5     {:.4}", report.precision);
    let _ = writeln!(s, "# mean mask IoU     {:.4}", report.mean_mask_iou);
    let _ = writeln!(s, "# mean res loss     {:.4}", report.mean_res_loss);
    let _ = writeln!(s, "# mean cap loss     {:.4}", report.mean_cap_loss);
    let _ = writeln!(s, "# caption exact     {:.4}", report.caption_exact);
    s
}
