//! Selection diagnostics for a trained checkpoint: where does the argmax
//! land relative to the supervised cell, and how good are boxes when it
//! lands correctly?
//!
//! Usage: cargo run --release --example diagnose -- <run_dir> <data_dir>

use refseg::config::TrainConfig;
use refseg::data::load_dataset;
use refseg::head::{box_iou, positive_cell};
use refseg::model::Network;
use refseg::vision::STRIDE;
use refseg::{checkpoint, head};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let run_dir = std::path::Path::new(&args[1]);
    let data_dir = std::path::Path::new(&args[2]);
    let cfg = TrainConfig::from_file(&run_dir.join("config.txt")).unwrap();
    let ds = load_dataset(data_dir).unwrap();
    let mut net: Network<f32> = Network::new(cfg.dims(ds.vocab.len()), cfg.variant, cfg.seed);
    checkpoint::load_into(&mut net.store, &run_dir.join("model.ckpt")).unwrap();

    let mut exact_cell = 0usize;
    let mut inside_box = 0usize;
    let mut iou_at_exact = Vec::new();
    let mut iou_at_wrong = Vec::new();
    let mut oracle_iou = Vec::new(); // box decoded at the supervised cell
    let n = ds.test.len();
    for s in &ds.test {
        let inf = net.infer_sample(s).unwrap();
        let (row, col) = inf.detection.cell;
        let (gr, gc) = positive_cell(&s.gt_box, STRIDE, 16, 16).unwrap();
        let iou = box_iou(&inf.detection.bbox, &s.gt_box);
        let cx = (col as f64 + 0.5) * STRIDE as f64;
        let cy = (row as f64 + 0.5) * STRIDE as f64;
        if (row, col) == (gr, gc) {
            exact_cell += 1;
            iou_at_exact.push(iou);
        } else {
            iou_at_wrong.push(iou);
        }
        if cx >= s.gt_box.x0 && cx < s.gt_box.x1 && cy >= s.gt_box.y0 && cy < s.gt_box.y1 {
            inside_box += 1;
        }
        // Oracle: decode the box at the supervised cell instead.
        let mut tape = refseg::tape::Tape::new();
        let mut binds = refseg::optim::TapeBindings::new();
        let fwd = net.forward(&mut tape, &mut binds, &s.image, &s.tokens).unwrap();
        let d = tape.value(fwd.head.deltas);
        let deltas = [
            d.at3(0, gr, gc) as f64,
            d.at3(1, gr, gc) as f64,
            d.at3(2, gr, gc) as f64,
            d.at3(3, gr, gc) as f64,
        ];
        let ob = head::decode_box(deltas, gr, gc, STRIDE).clip(s.image.width, s.image.height);
        oracle_iou.push(box_iou(&ob, &s.gt_box));
    }
    // Response-map quality: how much of R's mass lies inside the gt box,
    // and does R's argmax cell land inside it?
    let mut r_mass = Vec::new();
    let mut r_argmax_inside = 0usize;
    for s in &ds.test {
        let inf = net.infer_sample(s).unwrap();
        let r = &inf.response;
        let (h, w) = (r.shape[1], r.shape[2]);
        let mut inside = 0.0;
        let mut total = 0.0;
        let mut best = (0usize, f64::NEG_INFINITY);
        for y in 0..h {
            for x in 0..w {
                let v = r.at3(0, y, x);
                total += v;
                let (px, py) = ((x as f64 + 0.5) * 4.0, (y as f64 + 0.5) * 4.0);
                let is_in = px >= s.gt_box.x0 && px < s.gt_box.x1 && py >= s.gt_box.y0 && py < s.gt_box.y1;
                if is_in {
                    inside += v;
                }
                if v > best.1 {
                    best = (y * w + x, v);
                }
            }
        }
        r_mass.push(inside / total);
        let (by, bx) = (best.0 / w, best.0 % w);
        let (px, py) = ((bx as f64 + 0.5) * 4.0, (by as f64 + 0.5) * 4.0);
        if px >= s.gt_box.x0 && px < s.gt_box.x1 && py >= s.gt_box.y0 && py < s.gt_box.y1 {
            r_argmax_inside += 1;
        }
    }

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let frac_gt = |v: &[f64], t: f64| {
        if v.is_empty() { 0.0 } else { v.iter().filter(|&&x| x > t).count() as f64 / v.len() as f64 }
    };
    println!("samples: {n}");
    println!("argmax == supervised cell: {:.3}", exact_cell as f64 / n as f64);
    println!("argmax center inside gt box: {:.3}", inside_box as f64 / n as f64);
    println!(
        "box IoU when cell exact: mean {:.3}, >0.5 {:.3} (n={})",
        mean(&iou_at_exact),
        frac_gt(&iou_at_exact, 0.5),
        iou_at_exact.len()
    );
    println!(
        "box IoU when cell wrong: mean {:.3} (n={})",
        mean(&iou_at_wrong),
        iou_at_wrong.len()
    );
    println!(
        "box IoU decoding at supervised cell: mean {:.3}, >0.5 {:.3}",
        mean(&oracle_iou),
        frac_gt(&oracle_iou, 0.5)
    );
    println!(
        "response mass inside gt box: mean {:.3}; R argmax inside gt box: {:.3}",
        mean(&r_mass),
        r_argmax_inside as f64 / n as f64
    );

    // Split hit rates by expression kind: bare "<color> <shape>" vs spatial
    // qualifier sentences.
    let mut simple = (0usize, 0usize);
    let mut spatial = (0usize, 0usize);
    for s in &ds.test {
        let inf = net.infer_sample(s).unwrap();
        let hit = box_iou(&inf.detection.bbox, &s.gt_box) > 0.5;
        let bucket = if s.words.len() == 2 { &mut simple } else { &mut spatial };
        bucket.1 += 1;
        if hit {
            bucket.0 += 1;
        }
    }
    println!(
        "precision on simple expressions: {:.3} (n={}); on spatial: {:.3} (n={})",
        simple.0 as f64 / simple.1.max(1) as f64,
        simple.1,
        spatial.0 as f64 / spatial.1.max(1) as f64,
        spatial.1
    );
}
