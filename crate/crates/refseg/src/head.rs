//! Single-positive grid detection head with a mask decoder.
//!
//! From the gated feature map: per-cell objectness (sigmoid of a 1x1 conv),
//! per-cell box deltas (1x1 conv, decoded against the cell center), and a
//! mask decoder (7x7 region crop, two 3x3 convs, 2x nearest upsample to 14x14
//! logits). Training supervises the one cell containing the ground-truth box
//! center; testing takes the largest-score cell.

use crate::error::{Error, Result};
use crate::imgio::GrayImage;
use crate::optim::{he_limit, uniform_init, ParamId, ParamStore, TapeBindings};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{adaptive_avg_pool_plain, resize_bilinear_plain, Tensor};
use rand::Rng;

pub const ROI_SIZE: usize = 7;
pub const MASK_SIZE: usize = 14;
const MASK_CHANNELS: usize = 32;
/// Fixed logit gain on the objectness head. The classification loss is a
/// mean over all grid cells, which scales its per-cell gradient by 1/(H*W);
/// the gain keeps that head training at a pace comparable to the box and
/// mask branches under the shared learning rate.
const OBJ_GAIN: f64 = 12.0;

/// Axis-aligned box in pixel coordinates, `x0 < x1`, `y0 < y1`,
/// upper bounds exclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn clip(&self, img_w: usize, img_h: usize) -> BBox {
        let x0 = self.x0.clamp(0.0, img_w as f64);
        let y0 = self.y0.clamp(0.0, img_h as f64);
        BBox {
            x0,
            y0,
            x1: self.x1.clamp(x0, img_w as f64),
            y1: self.y1.clamp(y0, img_h as f64),
        }
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of two binary masks (pixels > 0 count as foreground).
pub fn mask_iou(a: &GrayImage, b: &GrayImage) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height), "mask extents differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&pa, &pb) in a.pixels.iter().zip(&b.pixels) {
        let (fa, fb) = (pa > 0, pb > 0);
        if fa && fb {
            inter += 1;
        }
        if fa || fb {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

// ── parameters ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct HeadParams {
    obj: (ParamId, ParamId),
    boxr: (ParamId, ParamId),
    mask1: (ParamId, ParamId),
    mask2: (ParamId, ParamId),
}

pub struct HeadVars {
    obj: (Var, Var),
    boxr: (Var, Var),
    mask1: (Var, Var),
    mask2: (Var, Var),
}

pub fn init_head<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    channels: usize,
    rng: &mut R,
) -> HeadParams {
    // Objectness and box convs start at zero weights with a low-score prior
    // bias, so early gradients concentrate on the positive cell instead of
    // fighting random background scores.
    let obj_w = store.add("head.obj.w", Tensor::zeros(vec![1, channels, 1, 1]));
    let obj_b = store.add("head.obj.b", Tensor::from_f64s(vec![1], &[-2.2 / OBJ_GAIN]));
    let obj = (obj_w, obj_b);
    let box_w = store.add("head.box.w", Tensor::zeros(vec![4, channels, 1, 1]));
    let box_b = store.add("head.box.b", Tensor::zeros(vec![4]));
    let boxr = (box_w, box_b);
    let m1w = store.add(
        "head.mask1.w",
        uniform_init(rng, vec![MASK_CHANNELS, channels, 3, 3], he_limit(channels * 9)),
    );
    let m1b = store.add("head.mask1.b", Tensor::zeros(vec![MASK_CHANNELS]));
    let m2w = store.add(
        "head.mask2.w",
        uniform_init(rng, vec![1, MASK_CHANNELS, 3, 3], he_limit(MASK_CHANNELS * 9)),
    );
    let m2b = store.add("head.mask2.b", Tensor::zeros(vec![1]));
    HeadParams { obj, boxr, mask1: (m1w, m1b), mask2: (m2w, m2b) }
}

pub fn bind_head<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    binds: &mut TapeBindings,
    p: &HeadParams,
) -> HeadVars {
    let bind2 = |tape: &mut Tape<T>, binds: &mut TapeBindings, pair: (ParamId, ParamId)| {
        (store.bind(tape, pair.0, binds), store.bind(tape, pair.1, binds))
    };
    HeadVars {
        obj: bind2(tape, binds, p.obj),
        boxr: bind2(tape, binds, p.boxr),
        mask1: bind2(tape, binds, p.mask1),
        mask2: bind2(tape, binds, p.mask2),
    }
}

// ── prediction ───────────────────────────────────────────────────────

pub struct HeadOutputs {
    /// `[1, H, W]` sigmoid objectness scores.
    pub objectness: Var,
    /// `[4, H, W]` raw box deltas (tx, ty, tw, th).
    pub deltas: Var,
}

pub fn predict<T: Scalar>(tape: &mut Tape<T>, vars: &HeadVars, gated: Var) -> Result<HeadOutputs> {
    let zo = tape.conv2d(gated, vars.obj.0, 1, 0)?;
    let zo = tape.add_channel_bias(zo, vars.obj.1)?;
    let zo = tape.scale(zo, OBJ_GAIN);
    let objectness = tape.sigmoid(zo);
    let zb = tape.conv2d(gated, vars.boxr.0, 1, 0)?;
    let deltas = tape.add_channel_bias(zb, vars.boxr.1)?;
    Ok(HeadOutputs { objectness, deltas })
}

/// Box decode: center = cell center + t * cell_size, size = cell_size * exp(t).
pub fn decode_box(deltas: [f64; 4], row: usize, col: usize, stride: usize) -> BBox {
    let s = stride as f64;
    let cx = (col as f64 + 0.5) * s + deltas[0] * s;
    let cy = (row as f64 + 0.5) * s + deltas[1] * s;
    let w = s * deltas[2].exp();
    let h = s * deltas[3].exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Inverse of [`decode_box`] for the training target.
pub fn encode_deltas(gt: &BBox, row: usize, col: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let (cx, cy) = gt.center();
    [
        cx / s - (col as f64 + 0.5),
        cy / s - (row as f64 + 0.5),
        (gt.width() / s).ln(),
        (gt.height() / s).ln(),
    ]
}

/// The cell containing the ground-truth box center.
pub fn positive_cell(gt: &BBox, stride: usize, grid_h: usize, grid_w: usize) -> Result<(usize, usize)> {
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(Error::Data(format!("degenerate ground-truth box {gt:?}")));
    }
    let (cx, cy) = gt.center();
    let row = (cy / stride as f64).floor();
    let col = (cx / stride as f64).floor();
    if row < 0.0 || col < 0.0 || row as usize >= grid_h || col as usize >= grid_w {
        return Err(Error::Data(format!("box center ({cx},{cy}) outside the feature grid")));
    }
    Ok((row as usize, col as usize))
}

/// Pixel box converted to continuous feature-grid coordinates.
pub fn grid_region(b: &BBox, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [b.y0 / s, b.x0 / s, b.y1 / s, b.x1 / s]
}

/// Mask decoder: 7x7 nearest crop of the region, two 3x3 convs with a relu
/// between, then 2x nearest upsample to 14x14 sigmoid probabilities.
pub fn mask_probs<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &HeadVars,
    gated: Var,
    region: [f64; 4],
) -> Result<Var> {
    let crop = tape.crop_resize_nearest(gated, region, ROI_SIZE, ROI_SIZE);
    let c1 = tape.conv2d(crop, vars.mask1.0, 1, 1)?;
    let c1 = tape.add_channel_bias(c1, vars.mask1.1)?;
    let r1 = tape.relu(c1);
    let c2 = tape.conv2d(r1, vars.mask2.0, 1, 1)?;
    let logits7 = tape.add_channel_bias(c2, vars.mask2.1)?;
    let logits = tape.upsample_nearest(logits7, MASK_SIZE / ROI_SIZE);
    Ok(tape.sigmoid(logits))
}

/// Ground-truth mask cropped to the box and area-resized to 14x14, binarized.
pub fn mask_target<T: Scalar>(mask: &GrayImage, gt: &BBox) -> Tensor<T> {
    let x0 = gt.x0.floor().max(0.0) as usize;
    let y0 = gt.y0.floor().max(0.0) as usize;
    let x1 = (gt.x1.ceil() as usize).min(mask.width).max(x0 + 1);
    let y1 = (gt.y1.ceil() as usize).min(mask.height).max(y0 + 1);
    let (cw, ch) = (x1 - x0, y1 - y0);
    let mut crop = vec![0.0; cw * ch];
    for y in 0..ch {
        for x in 0..cw {
            if mask.get(x0 + x, y0 + y) > 0 {
                crop[y * cw + x] = 1.0;
            }
        }
    }
    let pooled = adaptive_avg_pool_plain(&crop, ch, cw, MASK_SIZE, MASK_SIZE);
    let data = pooled.iter().map(|&v| if v >= 0.5 { T::one() } else { T::zero() }).collect();
    Tensor::new(vec![1, MASK_SIZE, MASK_SIZE], data)
}

/// The three RoI loss terms on the tape.
pub struct RoiLosses {
    pub cls: Var,
    pub boxr: Var,
    pub mask: Var,
}

/// Classification over all cells, box regression and mask decoding at the
/// positive cell only.
pub fn roi_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &HeadVars,
    outputs: &HeadOutputs,
    gated: Var,
    gt_box: &BBox,
    gt_mask: &GrayImage,
    stride: usize,
) -> Result<RoiLosses> {
    let s = tape.shape(outputs.objectness).to_vec();
    let (h, w) = (s[1], s[2]);
    let (row, col) = positive_cell(gt_box, stride, h, w)?;

    let mut onehot = Tensor::<T>::zeros(vec![1, h, w]);
    onehot.data[row * w + col] = T::one();
    let target = tape.constant(onehot);
    let cls = tape.bce_mean(outputs.objectness, target)?;

    let pred_deltas = tape.select_cell(outputs.deltas, row, col)?;
    let target_deltas =
        tape.constant(Tensor::from_f64s(vec![4], &encode_deltas(gt_box, row, col, stride)));
    let boxr = tape.smooth_l1_sum(pred_deltas, target_deltas)?;

    let probs = mask_probs(tape, vars, gated, grid_region(gt_box, stride))?;
    let target = tape.constant(mask_target::<T>(gt_mask, gt_box));
    let mask = tape.bce_mean(probs, target)?;

    Ok(RoiLosses { cls, boxr, mask })
}

// ── test-time selection ──────────────────────────────────────────────

/// One detection: score, decoded box, full-resolution soft mask, source cell.
pub struct Detection {
    pub score: f64,
    pub bbox: BBox,
    /// `img_h * img_w` values in [0, 1]; zero outside the decoded box.
    pub mask: Vec<f64>,
    pub cell: (usize, usize),
}

impl Detection {
    pub fn mask_image(&self, img_w: usize, img_h: usize) -> GrayImage {
        let mut g = GrayImage::zeros(img_w, img_h);
        for (i, &v) in self.mask.iter().enumerate() {
            g.pixels[i] = if v >= 0.5 { 255 } else { 0 };
        }
        g
    }
}

/// Argmax cell of the objectness map; ties break to the smallest row-major
/// index. Returns `(row, col)`.
pub fn argmax_cell<T: Scalar>(objectness: &Tensor<T>) -> (usize, usize) {
    let (h, w) = (objectness.shape[1], objectness.shape[2]);
    let mut best = (0usize, T::neg_infinity());
    for i in 0..h * w {
        if objectness.data[i] > best.1 {
            best = (i, objectness.data[i]);
        }
    }
    (best.0 / w, best.0 % w)
}

/// Decodes the largest-score cell into a detection: clipped box plus the
/// decoded mask bilinearly pasted into the box region of a zero canvas.
pub fn select_best<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &HeadVars,
    outputs: &HeadOutputs,
    gated: Var,
    stride: usize,
    img_w: usize,
    img_h: usize,
) -> Result<Detection> {
    let (row, col) = argmax_cell(tape.value(outputs.objectness));
    let score = tape
        .value(outputs.objectness)
        .at3(0, row, col)
        .to_f64();
    let d = tape.value(outputs.deltas);
    let deltas = [
        d.at3(0, row, col).to_f64(),
        d.at3(1, row, col).to_f64(),
        d.at3(2, row, col).to_f64(),
        d.at3(3, row, col).to_f64(),
    ];
    let bbox = decode_box(deltas, row, col, stride).clip(img_w, img_h);

    let mut mask = vec![0.0; img_w * img_h];
    let (bx0, by0) = (bbox.x0.floor() as usize, bbox.y0.floor() as usize);
    let (bx1, by1) = ((bbox.x1.ceil() as usize).min(img_w), (bbox.y1.ceil() as usize).min(img_h));
    if bx1 > bx0 && by1 > by0 {
        let probs = mask_probs(tape, vars, gated, grid_region(&bbox, stride))?;
        let probs64 = tape.value(probs).to_f64_vec();
        let resized =
            resize_bilinear_plain(&probs64, MASK_SIZE, MASK_SIZE, by1 - by0, bx1 - bx0);
        for y in by0..by1 {
            for x in bx0..bx1 {
                mask[y * img_w + x] = resized[(y - by0) * (bx1 - bx0) + (x - bx0)];
            }
        }
    }
    Ok(Detection { score, bbox, mask, cell: (row, col) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, filled_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_identical_boxes() {
        let b = BBox::new(3.0, 4.0, 10.0, 12.0);
        assert_eq!(box_iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_one_seventh_case() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((box_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint_masks_is_zero() {
        let mut a = GrayImage::zeros(4, 4);
        let mut b = GrayImage::zeros(4, 4);
        a.set(0, 0, 255);
        b.set(3, 3, 255);
        assert_eq!(mask_iou(&a, &b), 0.0);
        let empty = GrayImage::zeros(4, 4);
        assert_eq!(mask_iou(&empty, &empty), 0.0);
    }

    #[test]
    fn decode_zero_deltas_centers_on_cell() {
        let b = decode_box([0.0; 4], 2, 3, 4);
        assert_eq!(b.center(), (14.0, 10.0));
        assert_eq!((b.width(), b.height()), (4.0, 4.0));
        assert_eq!(b, BBox::new(12.0, 8.0, 16.0, 12.0));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let gt = BBox::new(10.0, 20.0, 26.0, 44.0);
        let (row, col) = positive_cell(&gt, 4, 16, 16).unwrap();
        let deltas = encode_deltas(&gt, row, col, 4);
        let back = decode_box(deltas, row, col, 4);
        assert!((back.x0 - gt.x0).abs() < 1e-9);
        assert!((back.y1 - gt.y1).abs() < 1e-9);
    }

    fn zero_head(channels: usize) -> (ParamStore<f64>, HeadParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = init_head(&mut store, channels, &mut rng);
        let names: Vec<String> = store.entries().map(|e| e.name.clone()).collect();
        for n in names {
            let id = store.id(&n).unwrap();
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        (store, p)
    }

    #[test]
    fn zero_params_give_half_scores_and_cell_boxes() {
        let (store, p) = zero_head(8);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_head(&store, &mut tape, &mut binds, &p);
        let gated = tape.constant(filled_tensor(5, vec![8, 4, 4], 1.0));
        let out = predict(&mut tape, &vars, gated).unwrap();
        assert!(tape.value(out.objectness).data.iter().all(|&v| v == 0.5));
        assert!(tape.value(out.deltas).data.iter().all(|&v| v == 0.0));
        let b = decode_box([0.0; 4], 1, 1, 4);
        assert_eq!(b.center(), (6.0, 6.0));
    }

    #[test]
    fn objectness_grads_match_finite_differences() {
        let w = filled_tensor(61, vec![1, 3, 1, 1], 0.8);
        let b = filled_tensor(62, vec![1], 0.5);
        let gated = filled_tensor(63, vec![3, 4, 4], 1.0);
        let report = check_gradients(&[w, b], |tape, vars| {
            let g = tape.constant(gated.clone());
            let z = tape.conv2d(g, vars[0], 1, 0).unwrap();
            let z = tape.add_channel_bias(z, vars[1]).unwrap();
            let s = tape.sigmoid(z);
            let ramp = tape.constant(filled_tensor(64, vec![1, 4, 4], 1.0));
            let m = tape.mul(s, ramp).unwrap();
            tape.sum(m)
        });
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }

    #[test]
    fn box_loss_smooth_l1_example() {
        // Zero-delta prediction against gt deltas (0.5, 0, 0, 0).
        let mut tape = Tape::<f64>::new();
        let pred = tape.constant(Tensor::zeros(vec![4]));
        let target = tape.constant(Tensor::from_f64s(vec![4], &[0.5, 0.0, 0.0, 0.0]));
        let l = tape.smooth_l1_sum(pred, target).unwrap();
        assert!((tape.scalar_value(l) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_uniform_half_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let obj = tape.constant(Tensor::full(vec![1, 16, 16], 0.5));
        let mut onehot = Tensor::<f64>::zeros(vec![1, 16, 16]);
        onehot.data[37] = 1.0;
        let t = tape.constant(onehot);
        let l = tape.bce_mean(obj, t).unwrap();
        assert!((tape.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_roi_predictions_are_near_zero() {
        // Score 1-eps at the positive cell, eps elsewhere, exact deltas and
        // an exact mask: total loss below 1e-3.
        let eps = 1e-4;
        let (h, w) = (8, 8);
        let gt = BBox::new(8.0, 8.0, 16.0, 16.0);
        let (row, col) = positive_cell(&gt, 4, h, w).unwrap();

        let mut tape = Tape::<f64>::new();
        let mut obj = Tensor::full(vec![1, h, w], eps);
        obj.data[row * w + col] = 1.0 - eps;
        let mut onehot = Tensor::<f64>::zeros(vec![1, h, w]);
        onehot.data[row * w + col] = 1.0;
        let objv = tape.constant(obj);
        let t = tape.constant(onehot);
        let l = tape.bce_mean(objv, t).unwrap();
        let cls = tape.scalar_value(l);

        let deltas = encode_deltas(&gt, row, col, 4);
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64s(vec![4], &deltas));
        let tt = tape.constant(Tensor::from_f64s(vec![4], &deltas));
        let boxr = {
            let l = tape.smooth_l1_sum(p, tt).unwrap();
            tape.scalar_value(l)
        };

        let mut mask = GrayImage::zeros(24, 24);
        for y in 8..16 {
            for x in 8..16 {
                mask.set(x, y, 255);
            }
        }
        let target = mask_target::<f64>(&mask, &gt);
        let mut tape = Tape::<f64>::new();
        let probs = tape.constant(target.clone());
        let tv = tape.constant(target);
        let maskl = {
            let l = tape.bce_mean(probs, tv).unwrap();
            tape.scalar_value(l)
        };

        assert!(cls + boxr + maskl < 1e-3, "{}", cls + boxr + maskl);
    }

    #[test]
    fn roi_loss_rejects_center_off_grid() {
        let gt = BBox::new(100.0, 100.0, 120.0, 120.0);
        assert!(matches!(positive_cell(&gt, 4, 16, 16), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_unique_and_tie_rules() {
        let mut t = Tensor::<f64>::zeros(vec![1, 4, 4]);
        t.data[2 * 4 + 3] = 0.9;
        assert_eq!(argmax_cell(&t), (2, 3));
        let mut t = Tensor::<f64>::zeros(vec![1, 4, 4]);
        t.data[5] = 0.7;
        t.data[9] = 0.7;
        assert_eq!(argmax_cell(&t), (1, 1)); // smaller row-major index wins
    }

    #[test]
    fn argmax_invariant_under_monotone_transform() {
        for seed in 0..10 {
            let t = filled_tensor(800 + seed, vec![1, 5, 5], 2.0);
            let a = argmax_cell(&t);
            let mut mapped = t.clone();
            // Strictly monotone: 3x + exp(x/4).
            mapped.data.iter_mut().for_each(|v| *v = 3.0 * *v + (*v / 4.0).exp());
            assert_eq!(argmax_cell(&mapped), a);
        }
    }

    #[test]
    fn selected_mask_zero_outside_box() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = init_head(&mut store, 6, &mut rng);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_head(&store, &mut tape, &mut binds, &p);
        let gated = tape.constant(filled_tensor(10, vec![6, 8, 8], 1.0));
        let out = predict(&mut tape, &vars, gated).unwrap();
        let det = select_best(&mut tape, &vars, &out, gated, 4, 32, 32).unwrap();
        assert!(det.bbox.x0 >= 0.0 && det.bbox.x1 <= 32.0);
        assert!(det.bbox.y0 >= 0.0 && det.bbox.y1 <= 32.0);
        for y in 0..32 {
            for x in 0..32 {
                let inside = (x as f64) >= det.bbox.x0.floor()
                    && (x as f64) < det.bbox.x1.ceil()
                    && (y as f64) >= det.bbox.y0.floor()
                    && (y as f64) < det.bbox.y1.ceil();
                if !inside {
                    assert_eq!(det.mask[y * 32 + x], 0.0, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn decoded_boxes_clip_into_bounds() {
        for seed in 0..30 {
            let d = filled_tensor(900 + seed, vec![4], 3.0);
            let b = decode_box([d.data[0], d.data[1], d.data[2], d.data[3]], 0, 15, 4)
                .clip(64, 64);
            assert!(b.x0 >= 0.0 && b.x1 <= 64.0 && b.x0 <= b.x1);
            assert!(b.y0 >= 0.0 && b.y1 <= 64.0 && b.y0 <= b.y1);
        }
    }

    #[test]
    fn full_roi_loss_runs_on_tape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = init_head(&mut store, 6, &mut rng);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_head(&store, &mut tape, &mut binds, &p);
        let gated_t = filled_tensor(14, vec![6, 8, 8], 1.0).with_grad();
        let gated = tape.leaf(gated_t);
        let out = predict(&mut tape, &vars, gated).unwrap();
        let gt = BBox::new(6.0, 10.0, 20.0, 24.0);
        let mut mask = GrayImage::zeros(32, 32);
        for y in 10..24 {
            for x in 6..20 {
                mask.set(x, y, 255);
            }
        }
        let losses = roi_loss(&mut tape, &vars, &out, gated, &gt, &mask, 4).unwrap();
        let a = tape.add(losses.cls, losses.boxr).unwrap();
        let total = tape.add(a, losses.mask).unwrap();
        tape.backward(total).unwrap();
        assert!(tape.grad(gated).is_some());
        assert!(tape.scalar_value(total).is_finite());
    }
}
