//! Sentence-generated dynamic filters and spatial region responses.
//!
//! The sentence feature generates seven 1x1 filters (one global, six tied to
//! half-image regions: up, down, left, right, horizontal and vertical middle).
//! Each filter is dotted against every feature-map cell; responses outside a
//! filter's region are zeroed; a generated 7-channel fusion filter (plus an
//! optional generated scalar bias) combines the maps into a single sigmoid
//! response map. The response map gates the visual features for the heads.

use crate::error::{Error, Result};
use crate::imgio::GrayImage;
use crate::optim::{he_limit, uniform_init, ParamId, ParamStore, TapeBindings};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{adaptive_avg_pool_plain, Tensor};
use rand::Rng;

pub const REGION_COUNT: usize = 7;

/// Binary membership mask for one of the seven regions.
#[derive(Clone, Debug)]
pub struct RegionSpec {
    pub id: usize,
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
}

impl RegionSpec {
    pub fn cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Tensor::new(vec![1, self.h, self.w], data)
    }
}

/// Region extents use floor splits: halves may differ by one row or column
/// when the extent is odd; the up/down and left/right pairs always partition
/// the grid.
pub fn region_mask(id: usize, h: usize, w: usize) -> Result<RegionSpec> {
    if !(1..=REGION_COUNT).contains(&id) {
        return Err(Error::Region { id });
    }
    let row_band = |y0: usize, y1: usize| (y0, y1, 0, w);
    let col_band = |x0: usize, x1: usize| (0, h, x0, x1);
    let (y0, y1, x0, x1) = match id {
        1 => (0, h, 0, w),
        2 => row_band(0, h / 2),
        3 => row_band(h / 2, h),
        4 => col_band(0, w / 2),
        5 => col_band(w / 2, w),
        6 => row_band(h / 4, h / 4 + h / 2),
        7 => col_band(w / 4, w / 4 + w / 2),
        _ => unreachable!(),
    };
    let mut mask = vec![false; h * w];
    for y in y0..y1 {
        for x in x0..x1 {
            mask[y * w + x] = true;
        }
    }
    Ok(RegionSpec { id, h, w, mask })
}

// ── filter generation ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct FilterGenParams {
    /// Seven affine maps from the sentence feature to per-region filters.
    gens: Vec<(ParamId, ParamId)>,
    /// One affine map to the 7 fusion weights (+1 bias when enabled).
    fusion: (ParamId, ParamId),
    pub channels: usize,
    pub fusion_bias: bool,
}

pub struct FilterGenVars {
    gens: Vec<(Var, Var)>,
    fusion: (Var, Var),
    fusion_bias: bool,
}

/// Generated per-sentence filters: seven tanh-bounded `[1, C]` filters, a
/// `[1, 7]` fusion weight row and an optional `[1, 1]` fusion bias.
pub struct DynamicFilterSet {
    pub filters: Vec<Var>,
    pub fusion_weights: Var,
    pub fusion_bias: Option<Var>,
}

pub fn init_filtgen<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    sentence_dim: usize,
    channels: usize,
    fusion_bias: bool,
    rng: &mut R,
) -> FilterGenParams {
    let mut gens = Vec::with_capacity(REGION_COUNT);
    for i in 1..=REGION_COUNT {
        let limit = he_limit(sentence_dim);
        let w = store.add(
            &format!("filt.gen{i}.w"),
            uniform_init(rng, vec![sentence_dim, channels], limit),
        );
        let b = store.add(&format!("filt.gen{i}.b"), Tensor::zeros(vec![1, channels]));
        gens.push((w, b));
    }
    let out = REGION_COUNT + usize::from(fusion_bias);
    // Small weights plus a one-hot bias on the global region: fusion starts
    // as the plain global response and brings the spatial maps in as the
    // sentence-conditioned weights grow.
    let fw = store.add("filt.fusion.w", uniform_init(rng, vec![sentence_dim, out], 0.1));
    let mut fb = Tensor::zeros(vec![1, out]);
    fb.data[0] = T::one();
    let fb = store.add("filt.fusion.b", fb);
    FilterGenParams { gens, fusion: (fw, fb), channels, fusion_bias }
}

pub fn bind_filtgen<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    binds: &mut TapeBindings,
    p: &FilterGenParams,
) -> FilterGenVars {
    FilterGenVars {
        gens: p
            .gens
            .iter()
            .map(|&(w, b)| (store.bind(tape, w, binds), store.bind(tape, b, binds)))
            .collect(),
        fusion: (store.bind(tape, p.fusion.0, binds), store.bind(tape, p.fusion.1, binds)),
        fusion_bias: p.fusion_bias,
    }
}

/// `filter_i = tanh(W_i . feature + b_i)`; fusion weights stay unactivated.
pub fn generate_filters<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &FilterGenVars,
    sentence_feature: Var,
) -> Result<DynamicFilterSet> {
    let mut filters = Vec::with_capacity(REGION_COUNT);
    for &(w, b) in &vars.gens {
        let z = tape.matmul(sentence_feature, w)?;
        let z = tape.add(z, b)?;
        filters.push(tape.tanh_act(z));
    }
    let z = tape.matmul(sentence_feature, vars.fusion.0)?;
    let raw = tape.add(z, vars.fusion.1)?;
    let fusion_weights = tape.slice_cols(raw, 0, REGION_COUNT)?;
    let fusion_bias = if vars.fusion_bias {
        Some(tape.slice_cols(raw, REGION_COUNT, 1)?)
    } else {
        None
    };
    Ok(DynamicFilterSet { filters, fusion_weights, fusion_bias })
}

/// Only the global (region 1) filter, for variants without the spatial
/// mechanism; generated by the same affine-plus-tanh map.
pub fn generate_global_filter<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &FilterGenVars,
    sentence_feature: Var,
) -> Result<Var> {
    let (w, b) = vars.gens[0];
    let z = tape.matmul(sentence_feature, w)?;
    let z = tape.add(z, b)?;
    Ok(tape.tanh_act(z))
}

/// Evaluation counters; the baseline variant must never touch regions 2..=7.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardStats {
    pub region_evals: [u64; REGION_COUNT],
}

/// Dots one generated filter against every cell of the feature map and zeroes
/// cells outside the region. Region 1 is the unmasked full map.
pub fn region_response<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    filter: Var,
    region_id: usize,
    stats: &mut ForwardStats,
) -> Result<Var> {
    let c = tape.shape(filter)[1];
    let kernel = tape.reshape(filter, vec![1, c, 1, 1])?;
    let raw = tape.conv2d(features, kernel, 1, 0)?;
    stats.region_evals[region_id - 1] += 1;
    if region_id == 1 {
        return Ok(raw);
    }
    let s = tape.shape(raw).to_vec();
    let spec = region_mask(region_id, s[1], s[2])?;
    let mask = tape.constant(spec.to_tensor());
    tape.mul(raw, mask)
}

pub struct FusedResponse {
    /// `[7, H, W]` concatenation of the region maps.
    pub stacked: Var,
    /// `[1, H, W]` sigmoid response map, strictly inside (0, 1).
    pub fused: Var,
}

/// Combines the seven region maps with the generated fusion filter:
/// sigmoid of a 1x1 7-channel convolution plus the generated bias.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    maps: &[Var],
    filters: &DynamicFilterSet,
) -> Result<FusedResponse> {
    assert_eq!(maps.len(), REGION_COUNT, "fuse expects the 7 region maps");
    let stacked = tape.concat_channels(maps)?;
    let kernel = tape.reshape(filters.fusion_weights, vec![1, REGION_COUNT, 1, 1])?;
    let mut z = tape.conv2d(stacked, kernel, 1, 0)?;
    if let Some(bias) = filters.fusion_bias {
        z = tape.add_scalar(z, bias);
    }
    let fused = tape.sigmoid(z);
    Ok(FusedResponse { stacked, fused })
}

/// Downsamples an image-resolution mask to the feature grid by average
/// pooling and thresholding at 0.5 (inclusive).
pub fn response_target<T: Scalar>(mask: &GrayImage, h: usize, w: usize) -> Tensor<T> {
    let src: Vec<f64> =
        mask.pixels.iter().map(|&p| if p > 0 { 1.0 } else { 0.0 }).collect();
    let pooled = adaptive_avg_pool_plain(&src, mask.height, mask.width, h, w);
    let data = pooled.iter().map(|&v| if v >= 0.5 { T::one() } else { T::zero() }).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Mean BCE between the fused response map and the pooled mask target.
pub fn response_loss<T: Scalar>(tape: &mut Tape<T>, fused: Var, target: Tensor<T>) -> Result<Var> {
    let t = tape.constant(target);
    tape.bce_mean(fused, t)
}

/// Gates the visual features by the response map (broadcast elementwise
/// product); the result feeds both the detection head and the caption branch.
pub fn gate_features<T: Scalar>(tape: &mut Tape<T>, features: Var, fused: Var) -> Result<Var> {
    tape.mul_channel_broadcast(features, fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, filled_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn region_examples_4x4() {
        let up = region_mask(2, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(up.mask[y * 4 + x], y < 2);
            }
        }
        let mid = region_mask(6, 4, 4).unwrap();
        for y in 0..4 {
            assert_eq!(mid.mask[y * 4], y == 1 || y == 2, "row {y}");
        }
    }

    #[test]
    fn up_down_partition() {
        let up = region_mask(2, 4, 4).unwrap();
        let down = region_mask(3, 4, 4).unwrap();
        for i in 0..16 {
            assert!(up.mask[i] ^ down.mask[i]);
        }
        assert_eq!(up.cells() + down.cells(), 16);
    }

    #[test]
    fn partition_and_half_area_for_all_extents() {
        for h in 1..=32 {
            for w in 1..=32 {
                let full = region_mask(1, h, w).unwrap();
                assert_eq!(full.cells(), h * w);
                let up = region_mask(2, h, w).unwrap();
                let down = region_mask(3, h, w).unwrap();
                let left = region_mask(4, h, w).unwrap();
                let right = region_mask(5, h, w).unwrap();
                for i in 0..h * w {
                    assert!(up.mask[i] ^ down.mask[i]);
                    assert!(left.mask[i] ^ right.mask[i]);
                }
                // Each band misses half the grid by at most one row/column.
                for id in 2..=REGION_COUNT {
                    let r = region_mask(id, h, w).unwrap();
                    let diff = (2 * r.cells()) as isize - (h * w) as isize;
                    assert!(diff.unsigned_abs() <= h.max(w), "region {id} at {h}x{w}");
                }
            }
        }
    }

    #[test]
    fn region_id_out_of_range() {
        assert!(matches!(region_mask(0, 4, 4), Err(Error::Region { id: 0 })));
        assert!(matches!(region_mask(8, 4, 4), Err(Error::Region { id: 8 })));
    }

    fn setup(seed: u64, dim: usize, c: usize, bias: bool) -> (ParamStore<f64>, FilterGenParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = init_filtgen(&mut store, dim, c, bias, &mut rng);
        (store, p)
    }

    #[test]
    fn zero_generator_zero_filters() {
        let (mut store, p) = setup(0, 6, 4, true);
        let names: Vec<String> = store.entries().map(|e| e.name.clone()).collect();
        for n in names {
            let id = store.id(&n).unwrap();
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_filtgen(&store, &mut tape, &mut binds, &p);
        let feat = tape.constant(Tensor::from_f64s(vec![1, 6], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]));
        let set = generate_filters(&mut tape, &vars, feat).unwrap();
        for f in &set.filters {
            assert!(tape.value(*f).data.iter().all(|&v| v == 0.0));
        }
        assert!(tape.value(set.fusion_weights).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filters_stay_in_open_unit_interval() {
        let (store, p) = setup(1, 6, 8, true);
        for seed in 0..20 {
            let mut tape = Tape::new();
            let mut binds = TapeBindings::new();
            let vars = bind_filtgen(&store, &mut tape, &mut binds, &p);
            let feat = tape.constant(filled_tensor(seed, vec![1, 6], 2.0));
            let set = generate_filters(&mut tape, &vars, feat).unwrap();
            for f in &set.filters {
                assert!(tape.value(*f).data.iter().all(|&v| v > -1.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn filter_generator_grads_match_finite_differences() {
        let w = filled_tensor(31, vec![6, 4], 0.7);
        let b = filled_tensor(32, vec![1, 4], 0.5);
        let feat = filled_tensor(33, vec![1, 6], 1.0);
        let report = check_gradients(&[w, b], |tape, vars| {
            let f = tape.constant(feat.clone());
            let z = tape.matmul(f, vars[0]).unwrap();
            let z = tape.add(z, vars[1]).unwrap();
            let fd = tape.tanh_act(z);
            let ramp = tape.constant(filled_tensor(34, vec![1, 4], 1.0));
            let m = tape.mul(fd, ramp).unwrap();
            tape.sum(m)
        });
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }

    #[test]
    fn response_is_per_cell_dot_product() {
        let mut tape = Tape::<f64>::new();
        let mut stats = ForwardStats::default();
        let f_vis = tape.constant(Tensor::full(vec![2, 3, 3], 1.0));
        let f_d = tape.constant(Tensor::from_f64s(vec![1, 2], &[0.5, 0.25]));
        let r = region_response(&mut tape, f_vis, f_d, 1, &mut stats).unwrap();
        assert!(tape.value(r).data.iter().all(|&v| (v - 0.75).abs() < 1e-15));
        assert_eq!(stats.region_evals[0], 1);
    }

    #[test]
    fn up_region_response_zero_on_down_rows() {
        let mut tape = Tape::<f64>::new();
        let mut stats = ForwardStats::default();
        let f_vis = tape.constant(filled_tensor(41, vec![3, 4, 4], 1.0));
        let f_d = tape.constant(filled_tensor(42, vec![1, 3], 1.0));
        let r = region_response(&mut tape, f_vis, f_d, 2, &mut stats).unwrap();
        let v = tape.value(r).clone();
        for y in 2..4 {
            for x in 0..4 {
                assert_eq!(v.at3(0, y, x), 0.0);
            }
        }
        for x in 0..4 {
            assert_ne!(v.at3(0, 0, x), 0.0);
        }
    }

    /// Brute-force oracle: dot products per cell, zeroed outside each region,
    /// then a 7-weight linear combination plus bias, then sigmoid.
    fn brute_force_fused(
        f_vis: &Tensor<f64>,
        filters: &[Vec<f64>],
        weights: &[f64],
        bias: f64,
    ) -> Vec<f64> {
        let (c, h, w) = (f_vis.shape[0], f_vis.shape[1], f_vis.shape[2]);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias;
                for (i, f) in filters.iter().enumerate() {
                    let inside = match i + 1 {
                        1 => true,
                        2 => y < h / 2,
                        3 => y >= h / 2,
                        4 => x < w / 2,
                        5 => x >= w / 2,
                        6 => y >= h / 4 && y < h / 4 + h / 2,
                        7 => x >= w / 4 && x < w / 4 + w / 2,
                        _ => unreachable!(),
                    };
                    if inside {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += f[ci] * f_vis.at3(ci, y, x);
                        }
                        acc += weights[i] * dot;
                    }
                }
                out[y * w + x] = 1.0 / (1.0 + (-acc).exp());
            }
        }
        out
    }

    #[test]
    fn responses_and_fusion_match_brute_force() {
        for seed in 0..20 {
            let c = 3;
            let f_vis = filled_tensor(500 + seed, vec![c, 4, 4], 1.0);
            let filters: Vec<Vec<f64>> =
                (0..7).map(|i| filled_tensor(600 + seed * 7 + i, vec![c], 1.0).data).collect();
            let weights = filled_tensor(700 + seed, vec![7], 1.0).data;
            let bias = filled_tensor(800 + seed, vec![1], 1.0).data[0];

            let mut tape = Tape::<f64>::new();
            let mut stats = ForwardStats::default();
            let fv = tape.constant(f_vis.clone());
            let filter_vars: Vec<Var> = filters
                .iter()
                .map(|f| tape.constant(Tensor::new(vec![1, c], f.clone())))
                .collect();
            let maps: Vec<Var> = (1..=7)
                .map(|i| region_response(&mut tape, fv, filter_vars[i - 1], i, &mut stats).unwrap())
                .collect();
            let wv = tape.constant(Tensor::new(vec![1, 7], weights.clone()));
            let bv = tape.constant(Tensor::new(vec![1, 1], vec![bias]));
            let set = DynamicFilterSet {
                filters: filter_vars,
                fusion_weights: wv,
                fusion_bias: Some(bv),
            };
            let fused = fuse(&mut tape, &maps, &set).unwrap();
            let got = &tape.value(fused.fused).data;
            let want = brute_force_fused(&f_vis, &filters, &weights, bias);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "seed {seed}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn fuse_zero_maps_is_half() {
        let mut tape = Tape::<f64>::new();
        let maps: Vec<Var> =
            (0..7).map(|_| tape.constant(Tensor::zeros(vec![1, 2, 2]))).collect();
        let filters = DynamicFilterSet {
            filters: vec![],
            fusion_weights: tape.constant(Tensor::from_f64s(vec![1, 7], &[1.0; 7])),
            fusion_bias: None,
        };
        let out = fuse(&mut tape, &maps, &filters).unwrap();
        assert!(tape.value(out.fused).data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fuse_one_hot_selects_region_one() {
        let mut tape = Tape::<f64>::new();
        let m1 = filled_tensor(90, vec![1, 3, 3], 1.0);
        let maps: Vec<Var> = (0..7)
            .map(|i| {
                if i == 0 {
                    tape.constant(m1.clone())
                } else {
                    tape.constant(filled_tensor(91 + i as u64, vec![1, 3, 3], 1.0))
                }
            })
            .collect();
        let mut onehot = vec![0.0; 7];
        onehot[0] = 1.0;
        let filters = DynamicFilterSet {
            filters: vec![],
            fusion_weights: tape.constant(Tensor::new(vec![1, 7], onehot)),
            fusion_bias: None,
        };
        let out = fuse(&mut tape, &maps, &filters).unwrap();
        for (got, &raw) in tape.value(out.fused).data.iter().zip(&m1.data) {
            let want = 1.0 / (1.0 + (-raw).exp());
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_map_stays_in_open_interval() {
        let mut tape = Tape::<f64>::new();
        let maps: Vec<Var> =
            (0..7).map(|i| tape.constant(filled_tensor(950 + i, vec![1, 4, 4], 2.0))).collect();
        let filters = DynamicFilterSet {
            filters: vec![],
            fusion_weights: tape.constant(filled_tensor(960, vec![1, 7], 1.0)),
            fusion_bias: None,
        };
        let out = fuse(&mut tape, &maps, &filters).unwrap();
        assert!(tape.value(out.fused).data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn permuting_regions_with_weights_keeps_fusion() {
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let maps_data: Vec<Tensor<f64>> =
            (0..7).map(|i| filled_tensor(970 + i, vec![1, 4, 4], 1.0)).collect();
        let weights = filled_tensor(980, vec![7], 1.0).data;

        let run = |order: &[usize]| {
            let mut tape = Tape::<f64>::new();
            let maps: Vec<Var> =
                order.iter().map(|&i| tape.constant(maps_data[i].clone())).collect();
            let w: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
            let filters = DynamicFilterSet {
                filters: vec![],
                fusion_weights: tape.constant(Tensor::new(vec![1, 7], w)),
                fusion_bias: None,
            };
            let out = fuse(&mut tape, &maps, &filters).unwrap();
            tape.value(out.fused).data.clone()
        };

        let identity: Vec<usize> = (0..7).collect();
        let a = run(&identity);
        let b = run(&perm);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn response_loss_examples() {
        // Uniform 0.5 response: ln 2 regardless of target.
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::full(vec![1, 2, 2], 0.5));
        let mut mask = GrayImage::zeros(4, 4);
        for y in 0..2 {
            for x in 0..2 {
                mask.set(x, y, 255);
            }
        }
        let target = response_target::<f64>(&mask, 2, 2);
        assert_eq!(target.data, vec![1.0, 0.0, 0.0, 0.0]);
        let l = response_loss(&mut tape, r, target.clone()).unwrap();
        assert!((tape.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);

        // Response equal to the target after clipping: loss near zero.
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(target.clone());
        let l = response_loss(&mut tape, r, target).unwrap();
        assert!(tape.scalar_value(l) < 1e-6);
    }

    #[test]
    fn gating_zero_and_identity() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(filled_tensor(99, vec![3, 2, 2], 1.0));
        let zero = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let one = tape.constant(Tensor::full(vec![1, 2, 2], 1.0));
        let g0 = gate_features(&mut tape, f, zero).unwrap();
        let g1 = gate_features(&mut tape, f, one).unwrap();
        assert!(tape.value(g0).data.iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(g1).data, tape.value(f).data);
    }

    #[test]
    fn gating_grads_flow_to_both_inputs() {
        let f = filled_tensor(101, vec![2, 3, 3], 1.0);
        let m = filled_tensor(102, vec![1, 3, 3], 1.0);
        let report = check_gradients(&[f, m], |tape, vars| {
            let g = gate_features(tape, vars[0], vars[1]).unwrap();
            let k = tape.constant(filled_tensor(103, vec![2, 3, 3], 1.0));
            let w = tape.mul(g, k).unwrap();
            tape.sum(w)
        });
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }

    #[test]
    fn baseline_single_filter_path_counts_only_region_one() {
        let mut tape = Tape::<f64>::new();
        let mut stats = ForwardStats::default();
        let f_vis = tape.constant(filled_tensor(110, vec![2, 4, 4], 1.0));
        let f_d = tape.constant(filled_tensor(111, vec![1, 2], 1.0));
        let raw = region_response(&mut tape, f_vis, f_d, 1, &mut stats).unwrap();
        let _r = tape.sigmoid(raw);
        assert_eq!(stats.region_evals, [1, 0, 0, 0, 0, 0, 0]);
    }

}
