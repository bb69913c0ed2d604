//! Full network assembly: sentence encoder, backbone, dynamic filters,
//! detection head and caption decoder, wired per ablation variant.

use crate::caption::{self, CaptionParams};
use crate::data::ReferringSample;
use crate::dynfilter::{self, FilterGenParams, ForwardStats, REGION_COUNT};
use crate::error::{Error, Result};
use crate::head::{self, Detection, HeadOutputs, HeadParams};
use crate::imgio::Raster;
use crate::lang::{self, LangParams};
use crate::optim::{ParamStore, TapeBindings};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vision::{self, VisParams, STRIDE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ablation variants, in the reporting row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    SpatialCoords,
    SpatialFilters,
    CaptionConsistency,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::SpatialCoords,
        Variant::SpatialFilters,
        Variant::CaptionConsistency,
        Variant::Full,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SpatialCoords => "spatial_coords",
            Variant::SpatialFilters => "spatial_filters",
            Variant::CaptionConsistency => "caption_consistency",
            Variant::Full => "full",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SpatialCoords => "+ spatial coords",
            Variant::SpatialFilters => "+ spatial-aware filters",
            Variant::CaptionConsistency => "+ caption-aware consistency",
            Variant::Full => "full model",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))
    }

    pub fn uses_coords(&self) -> bool {
        matches!(self, Variant::SpatialCoords)
    }

    pub fn uses_spatial_filters(&self) -> bool {
        matches!(self, Variant::SpatialFilters | Variant::Full)
    }

    pub fn uses_caption(&self) -> bool {
        matches!(self, Variant::CaptionConsistency | Variant::Full)
    }
}

#[derive(Clone, Debug)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub channels: usize,
    pub att_dim: usize,
    pub cap_hidden: usize,
    pub max_caption_len: usize,
    /// Square grid the caption input is resized to; `None` keeps the native grid.
    pub caption_grid: Option<usize>,
    pub fusion_bias: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab_size: 19,
            embed_dim: 16,
            hidden_dim: 32,
            channels: 32,
            att_dim: 32,
            cap_hidden: 64,
            max_caption_len: 15,
            caption_grid: None,
            fusion_bias: true,
        }
    }
}

pub struct Network<T> {
    pub dims: ModelDims,
    pub variant: Variant,
    pub store: ParamStore<T>,
    lang: LangParams,
    vis: VisParams,
    filt: FilterGenParams,
    head: HeadParams,
    cap: CaptionParams,
}

/// Comprehension-pass handles on the current tape.
pub struct CompForward {
    pub sentence: Var,
    pub features: Var,
    pub region_maps: Vec<Var>,
    pub fused: Var,
    pub gated: Var,
    pub head: HeadOutputs,
    pub stats: ForwardStats,
}

/// Per-sample loss terms; scalars live on the tape.
pub struct LossVars {
    pub cls: Var,
    pub boxr: Var,
    pub mask: Var,
    pub res: Var,
    pub cap: Option<Var>,
    pub total: Var,
}

/// Loss values pulled off the tape for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub boxr: f64,
    pub mask: f64,
    pub res: f64,
    pub cap: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_tape<T: Scalar>(tape: &Tape<T>, l: &LossVars) -> Self {
        LossReport {
            cls: tape.scalar_value(l.cls),
            boxr: tape.scalar_value(l.boxr),
            mask: tape.scalar_value(l.mask),
            res: tape.scalar_value(l.res),
            cap: l.cap.map(|c| tape.scalar_value(c)).unwrap_or(0.0),
            total: tape.scalar_value(l.total),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    pub fn add_assign(&mut self, other: &LossReport) {
        self.cls += other.cls;
        self.boxr += other.boxr;
        self.mask += other.mask;
        self.res += other.res;
        self.cap += other.cap;
        self.total += other.total;
    }

    pub fn scaled(&self, k: f64) -> LossReport {
        LossReport {
            cls: self.cls * k,
            boxr: self.boxr * k,
            mask: self.mask * k,
            res: self.res * k,
            cap: self.cap * k,
            total: self.total * k,
        }
    }
}

pub struct Inference {
    pub detection: Detection,
    pub response: Tensor<f64>,
    pub region_maps: Vec<Tensor<f64>>,
    pub caption: Vec<usize>,
    pub res_loss: f64,
    pub cap_loss: f64,
}

impl<T: Scalar> Network<T> {
    /// Deterministic initialization from a seed; parameter shapes depend on
    /// the variant (coordinate channels widen the feature maps).
    pub fn new(dims: ModelDims, variant: Variant, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat_c = dims.channels + if variant.uses_coords() { 2 } else { 0 };
        let lang =
            lang::init_lang(&mut store, dims.vocab_size, dims.embed_dim, dims.hidden_dim, &mut rng);
        let vis = vision::init_vis(&mut store, dims.channels, &mut rng);
        let filt = dynfilter::init_filtgen(
            &mut store,
            2 * dims.hidden_dim,
            feat_c,
            dims.fusion_bias,
            &mut rng,
        );
        let head = head::init_head(&mut store, feat_c, &mut rng);
        let cap = caption::init_caption(
            &mut store,
            2 * feat_c,
            dims.embed_dim,
            dims.vocab_size,
            dims.cap_hidden,
            dims.att_dim,
            dims.max_caption_len,
            &mut rng,
        );
        Network { dims, variant, store, lang, vis, filt, head, cap }
    }

    pub fn feat_channels(&self) -> usize {
        self.dims.channels + if self.variant.uses_coords() { 2 } else { 0 }
    }

    /// Comprehension pass: encode the sentence, extract features, generate
    /// filters, build the response map, gate the features and run the head.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        binds: &mut TapeBindings,
        image: &Raster,
        tokens: &[usize],
    ) -> Result<CompForward> {
        let mut stats = ForwardStats::default();
        let lang_vars = lang::bind_lang(&self.store, tape, binds, &self.lang);
        let encoding = lang::encode(tape, &lang_vars, tokens)?;

        let vis_vars = vision::bind_vis(&self.store, tape, binds, &self.vis);
        let image_t = tape.constant(vision::image_tensor::<T>(image));
        let mut features = vision::extract(tape, &vis_vars, image_t)?;
        if self.variant.uses_coords() {
            features = vision::append_coords(tape, features)?;
        }

        let filt_vars = dynfilter::bind_filtgen(&self.store, tape, binds, &self.filt);
        let (region_maps, fused) = if self.variant.uses_spatial_filters() {
            let set = dynfilter::generate_filters(tape, &filt_vars, encoding.feature)?;
            let maps: Vec<Var> = (1..=REGION_COUNT)
                .map(|i| {
                    dynfilter::region_response(tape, features, set.filters[i - 1], i, &mut stats)
                })
                .collect::<Result<_>>()?;
            let fused = dynfilter::fuse(tape, &maps, &set)?;
            (maps, fused.fused)
        } else {
            let filter = dynfilter::generate_global_filter(tape, &filt_vars, encoding.feature)?;
            let raw = dynfilter::region_response(tape, features, filter, 1, &mut stats)?;
            (vec![raw], tape.sigmoid(raw))
        };

        let gated = dynfilter::gate_features(tape, features, fused)?;
        let head_vars = head::bind_head(&self.store, tape, binds, &self.head);
        let head_out = head::predict(tape, &head_vars, gated)?;
        Ok(CompForward {
            sentence: encoding.feature,
            features,
            region_maps,
            fused,
            gated,
            head: head_out,
            stats,
        })
    }

    fn head_vars(&self, tape: &mut Tape<T>, binds: &mut TapeBindings) -> head::HeadVars {
        head::bind_head(&self.store, tape, binds, &self.head)
    }

    /// All loss terms for one sample. `alpha` scales the caption term; the
    /// caption branch is skipped entirely when the variant omits it or
    /// `alpha` is zero, so no caption gradients exist in those runs.
    pub fn sample_loss(
        &self,
        tape: &mut Tape<T>,
        binds: &mut TapeBindings,
        sample: &ReferringSample,
        alpha: f64,
    ) -> Result<(LossVars, ForwardStats)> {
        let fwd = self.forward(tape, binds, &sample.image, &sample.tokens)?;
        let head_vars = self.head_vars(tape, binds);
        let roi = head::roi_loss(
            tape,
            &head_vars,
            &fwd.head,
            fwd.gated,
            &sample.gt_box,
            &sample.mask,
            STRIDE,
        )?;
        let grid = tape.shape(fwd.fused).to_vec();
        let target = dynfilter::response_target::<T>(&sample.mask, grid[1], grid[2]);
        let res = dynfilter::response_loss(tape, fwd.fused, target)?;

        let mut total = tape.add(roi.cls, roi.boxr)?;
        total = tape.add(total, roi.mask)?;
        total = tape.add(total, res)?;

        let cap = if self.variant.uses_caption() && alpha > 0.0 {
            let cap_l = self.caption_loss_from(tape, binds, &fwd, &sample.tokens)?;
            let scaled = tape.scale(cap_l, alpha);
            total = tape.add(total, scaled)?;
            Some(cap_l)
        } else {
            None
        };

        Ok((
            LossVars { cls: roi.cls, boxr: roi.boxr, mask: roi.mask, res, cap, total },
            fwd.stats,
        ))
    }

    fn caption_loss_from(
        &self,
        tape: &mut Tape<T>,
        binds: &mut TapeBindings,
        fwd: &CompForward,
        tokens: &[usize],
    ) -> Result<Var> {
        let cap_vars = caption::bind_caption(&self.store, tape, binds, &self.cap);
        let embed = self
            .store
            .bind(tape, self.lang.embed, binds);
        let input =
            caption::build_caption_input(tape, fwd.features, fwd.gated, self.dims.caption_grid)?;
        let feats = caption::prepare_features(tape, &cap_vars, input)?;
        caption::caption_loss(tape, &cap_vars, embed, &feats, tokens)
    }

    /// Caption objective alone (the generation warm-up stage).
    pub fn caption_only_loss(
        &self,
        tape: &mut Tape<T>,
        binds: &mut TapeBindings,
        sample: &ReferringSample,
    ) -> Result<Var> {
        let fwd = self.forward(tape, binds, &sample.image, &sample.tokens)?;
        self.caption_loss_from(tape, binds, &fwd, &sample.tokens)
    }

    /// Comprehension, selection and greedy captioning on a scratch tape; no
    /// ground truth required. Used by the CLI `infer` command.
    pub fn infer(&self, image: &Raster, tokens: &[usize]) -> Result<Inference> {
        self.run_inference(image, tokens, None)
    }

    /// Like [`Network::infer`] but also reports the response and caption
    /// losses against the sample's ground truth. Used by evaluation.
    pub fn infer_sample(&self, sample: &ReferringSample) -> Result<Inference> {
        self.run_inference(&sample.image, &sample.tokens, Some(sample))
    }

    fn run_inference(
        &self,
        image: &Raster,
        tokens: &[usize],
        gt: Option<&ReferringSample>,
    ) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let fwd = self.forward(&mut tape, &mut binds, image, tokens)?;
        let head_vars = self.head_vars(&mut tape, &mut binds);
        let detection = head::select_best(
            &mut tape,
            &head_vars,
            &fwd.head,
            fwd.gated,
            STRIDE,
            image.width,
            image.height,
        )?;

        let res_loss = match gt {
            Some(s) => {
                let grid = tape.shape(fwd.fused).to_vec();
                let target = dynfilter::response_target::<T>(&s.mask, grid[1], grid[2]);
                let l = dynfilter::response_loss(&mut tape, fwd.fused, target)?;
                tape.scalar_value(l)
            }
            None => 0.0,
        };

        let cap_vars = caption::bind_caption(&self.store, &mut tape, &mut binds, &self.cap);
        let embed = self.store.bind(&mut tape, self.lang.embed, &mut binds);
        let input = caption::build_caption_input(
            &mut tape,
            fwd.features,
            fwd.gated,
            self.dims.caption_grid,
        )?;
        let feats = caption::prepare_features(&mut tape, &cap_vars, input)?;
        let caption = caption::greedy_decode(&mut tape, &cap_vars, embed, &feats)?;
        let cap_loss = match gt {
            Some(s) => {
                let l = caption::caption_loss(&mut tape, &cap_vars, embed, &feats, &s.tokens)?;
                tape.scalar_value(l)
            }
            None => 0.0,
        };

        let to_plain = |v: Var| -> Tensor<f64> {
            let t = tape.value(v);
            Tensor::new(t.shape.clone(), t.to_f64_vec())
        };
        Ok(Inference {
            detection,
            response: to_plain(fwd.fused),
            region_maps: fwd.region_maps.iter().map(|&m| to_plain(m)).collect(),
            caption,
            res_loss,
            cap_loss,
        })
    }

    /// Gradient norms reaching the language and visual encoders from the
    /// caption loss alone (the joint back-propagation contract).
    pub fn caption_grad_norms(&mut self, sample: &ReferringSample) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let loss = self.caption_only_loss(&mut tape, &mut binds, sample)?;
        tape.backward(loss)?;
        self.store.zero_grads();
        self.store.accumulate(&tape, &binds, 1.0)?;
        let lang_norm = self.store.grad_l2_norm("lang.");
        let vis_norm = self.store.grad_l2_norm("vis.");
        self.store.zero_grads();
        Ok((lang_norm, vis_norm))
    }
}
