//! The CR-Seg backbone and the road cascade.
//!
//! Five VGG-16-style convolutional stages (13 conv layers total) with SeLU
//! activations and 2x2 stride-2 ceil-mode max pooling between stages. After
//! the last conv of each stage (pre-pooling) a 1x1 one-channel side conv
//! taps the features; side logits are bilinearly upsampled to the input
//! size, concatenated, and fused by a final 1x1 conv. Sigmoids produce the
//! per-side and fused probability maps. A per-stage two-layer 1x1 MLP with
//! L2 normalization yields the pixel embeddings used by the contrastive
//! branch; it never participates in inference.
//!
//! No pretrained weights anywhere: everything is seeded normal init.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use layers::{
    bilinear_backward2, bilinear_resize2, l2_normalize, l2_normalize_backward, maxpool2_backward,
    maxpool2_ceil, selu_backward_inplace, selu_inplace, sigmoid2, sigmoid_backward2, Conv,
};

pub const NUM_STAGES: usize = 5;

/// Downsampling factor of stage `m` (0-based): 1, 2, 4, 8, 16.
pub fn stage_stride(stage: usize) -> usize {
    1 << stage
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrSegConfig {
    pub in_channels: usize,
    /// Channel count of stage 1; stages carry base * [1, 2, 4, 8, 8].
    pub base_width: usize,
    /// Convs per stage; fixed VGG-16 prefix [2, 2, 3, 3, 3].
    pub stage_convs: [usize; 5],
    /// Output dimension of the per-stage embedding heads.
    pub embed_dim: usize,
}

impl Default for CrSegConfig {
    fn default() -> Self {
        CrSegConfig {
            in_channels: 1,
            base_width: 64,
            stage_convs: [2, 2, 3, 3, 3],
            embed_dim: 32,
        }
    }
}

impl CrSegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.base_width < 8 {
            return Err(Error::Config(format!(
                "base_width must be >= 8, got {}",
                self.base_width
            )));
        }
        if self.stage_convs.iter().sum::<usize>() != 13 {
            return Err(Error::Config(format!(
                "stage_convs must sum to 13, got {:?}",
                self.stage_convs
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        let b = self.base_width;
        [b, b * 2, b * 4, b * 8, b * 8]
    }
}

/// Closed-form parameter count of the 13-conv backbone (weights + biases),
/// the quantity the build asserts against the actual arrays.
pub fn expected_backbone_param_count(cfg: &CrSegConfig) -> usize {
    let ch = cfg.stage_channels();
    let mut cin = cfg.in_channels;
    let mut count = 0;
    for (stage, &n_convs) in cfg.stage_convs.iter().enumerate() {
        for _ in 0..n_convs {
            count += 9 * cin * ch[stage] + ch[stage];
            cin = ch[stage];
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StageParams {
    pub convs: Vec<Conv>,
    pub side: Conv,
    pub proj_hidden: Conv,
    pub proj_out: Conv,
}

/// All trainable arrays of one CR-Seg network; the same structure doubles
/// as a gradient (and momentum) buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub(crate) stages: Vec<StageParams>,
    pub(crate) fuse: Conv,
}

impl ParamSet {
    pub(crate) fn zeros_like(&self) -> ParamSet {
        ParamSet {
            stages: self
                .stages
                .iter()
                .map(|s| StageParams {
                    convs: s.convs.iter().map(Conv::zeros_like).collect(),
                    side: s.side.zeros_like(),
                    proj_hidden: s.proj_hidden.zeros_like(),
                    proj_out: s.proj_out.zeros_like(),
                })
                .collect(),
            fuse: self.fuse.zeros_like(),
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.stages
            .iter()
            .flat_map(|s| {
                s.convs
                    .iter()
                    .chain([&s.side, &s.proj_hidden, &s.proj_out])
            })
            .chain(std::iter::once(&self.fuse))
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv> {
        self.stages
            .iter_mut()
            .flat_map(|s| {
                s.convs
                    .iter_mut()
                    .chain([&mut s.side, &mut s.proj_hidden, &mut s.proj_out])
            })
            .chain(std::iter::once(&mut self.fuse))
    }

    /// Accumulate another gradient buffer (fixed canonical order, so batch
    /// reductions are deterministic).
    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.convs_mut().zip(other.convs()) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    /// Canonical (name, shape, data) triples over every parameter array.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        self.named(|c| {
            [
                (c.0.clone() + ".weight", c.1.w.shape().to_vec(), c.1.w.as_slice().unwrap()),
                (c.0 + ".bias", c.1.b.shape().to_vec(), c.1.b.as_slice().unwrap()),
            ]
        })
    }

    fn named<'a, T, F>(&'a self, f: F) -> Vec<T>
    where
        F: Fn((String, &'a Conv)) -> [T; 2],
    {
        let mut out = Vec::new();
        for (m, s) in self.stages.iter().enumerate() {
            for (i, conv) in s.convs.iter().enumerate() {
                out.extend(f((format!("stage{}.conv{}", m + 1, i + 1), conv)));
            }
            out.extend(f((format!("stage{}.side", m + 1), &s.side)));
            out.extend(f((format!("stage{}.proj1", m + 1), &s.proj_hidden)));
            out.extend(f((format!("stage{}.proj2", m + 1), &s.proj_out)));
        }
        out.extend(f(("fuse".into(), &self.fuse)));
        out
    }

    /// Weight slices only (biases excluded), for the weight-decay term.
    pub fn weight_slices(&self) -> Vec<&[f32]> {
        self.convs().map(|c| c.w.as_slice().unwrap()).collect()
    }

    /// Apply one SGD-with-momentum step: v = mu*v + g; p -= lr*v.
    /// `decay` is added to weight gradients only (biases are exempt).
    pub fn sgd_step(&mut self, grads: &ParamSet, velocity: &mut ParamSet, lr: f32, momentum: f32, decay: f32) {
        for ((p, g), v) in self
            .convs_mut()
            .zip(grads.convs())
            .zip(velocity.convs_mut())
        {
            for ((pw, &gw), vw) in p.w.iter_mut().zip(g.w.iter()).zip(v.w.iter_mut()) {
                *vw = momentum * *vw + gw + decay * *pw;
                *pw -= lr * *vw;
            }
            for ((pb, &gb), vb) in p.b.iter_mut().zip(g.b.iter()).zip(v.b.iter_mut()) {
                *vb = momentum * *vb + gb;
                *pb -= lr * *vb;
            }
        }
    }
}

/// The multi-stage-fusion segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct CrSeg {
    cfg: CrSegConfig,
    seed: u64,
    pub params: ParamSet,
}

/// Everything one forward pass produces: input-sized side and fused
/// probability maps plus the per-stage unit-normalized embedding pyramid.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub side_probs: Vec<Array2<f32>>,
    pub fused_prob: Array2<f32>,
    pub stage_embeddings: Vec<Array3<f32>>,
}

/// Build a CR-Seg network with seeded normal initialization.
pub fn build_crseg(cfg: &CrSegConfig, seed: u64) -> Result<CrSeg> {
    cfg.validate()?;
    let ch = cfg.stage_channels();
    let mut layer = 0u64;
    let mut next_rng = |tag: &str| {
        layer += 1;
        stream(seed, tag, &[layer])
    };

    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut cin = cfg.in_channels;
    for (m, &n_convs) in cfg.stage_convs.iter().enumerate() {
        let mut convs = Vec::with_capacity(n_convs);
        for _ in 0..n_convs {
            convs.push(Conv::seeded(ch[m], cin, 3, &mut next_rng("init")));
            cin = ch[m];
        }
        stages.push(StageParams {
            convs,
            side: Conv::seeded(1, ch[m], 1, &mut next_rng("init")),
            proj_hidden: Conv::seeded(cfg.embed_dim, ch[m], 1, &mut next_rng("init")),
            proj_out: Conv::seeded(cfg.embed_dim, cfg.embed_dim, 1, &mut next_rng("init")),
        });
    }
    let fuse = Conv::seeded(1, NUM_STAGES, 1, &mut next_rng("init"));

    let params = ParamSet { stages, fuse };
    let actual: usize = params
        .stages
        .iter()
        .flat_map(|s| s.convs.iter())
        .map(Conv::param_count)
        .sum();
    assert_eq!(
        actual,
        expected_backbone_param_count(cfg),
        "backbone parameter count must match the closed-form value"
    );
    Ok(CrSeg {
        cfg: cfg.clone(),
        seed,
        params,
    })
}

/// Per-stage activations cached by the training forward pass.
pub(crate) struct StageTrace {
    /// Post-SeLU output of every conv in the stage; last entry is the
    /// stage output feeding side/projection/pool.
    conv_outs: Vec<Array3<f32>>,
    /// Pooled stage output (absent for the last stage).
    pooled: Option<Array3<f32>>,
    pool_argmax: Option<Vec<u32>>,
    side_logit: Array2<f32>,
    proj_hidden_out: Option<Array3<f32>>,
    emb: Option<Array3<f32>>,
    emb_norms: Option<Array2<f32>>,
}

/// Full activation trace of one sample, sufficient for a backward pass.
pub(crate) struct ForwardTrace {
    input: Array3<f32>,
    stages: Vec<StageTrace>,
    side_logit_up: Vec<Array2<f32>>,
    pub side_probs: Vec<Array2<f32>>,
    pub fused_prob: Array2<f32>,
}

impl ForwardTrace {
    pub fn embedding(&self, stage: usize) -> &Array3<f32> {
        self.stages[stage]
            .emb
            .as_ref()
            .expect("forward was run without embeddings")
    }
}

impl CrSeg {
    pub fn config(&self) -> &CrSegConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_input(&self, image: &Array3<f32>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Argument(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h < 16 || w < 16 {
            return Err(Error::Argument(format!(
                "spatial dims {h}x{w} too small for 4 poolings (need >= 16)"
            )));
        }
        Ok(())
    }

    /// Full forward pass, embeddings included.
    pub fn forward(&self, image: &Array3<f32>) -> Result<StageOutputs> {
        let trace = self.forward_trace(image, true)?;
        Ok(StageOutputs {
            side_probs: trace.side_probs.clone(),
            fused_prob: trace.fused_prob.clone(),
            stage_embeddings: (0..NUM_STAGES)
                .map(|m| trace.embedding(m).clone())
                .collect(),
        })
    }

    /// Inference fast path: fused probability map only, no embedding heads.
    pub fn predict(&self, image: &Array3<f32>) -> Result<Array2<f32>> {
        Ok(self.forward_trace(image, false)?.fused_prob)
    }

    /// Forward pass that keeps every activation needed by [`Self::backward`].
    pub(crate) fn forward_trace(
        &self,
        image: &Array3<f32>,
        with_embeddings: bool,
    ) -> Result<ForwardTrace> {
        self.check_input(image)?;
        let (_, in_h, in_w) = image.dim();

        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut current = image.clone();
        for (m, sp) in self.params.stages.iter().enumerate() {
            let mut conv_outs = Vec::with_capacity(sp.convs.len());
            for conv in &sp.convs {
                let mut out = conv.forward(&current);
                selu_inplace(&mut out);
                current = out.clone();
                conv_outs.push(out);
            }
            let stage_out = conv_outs.last().expect("stage has convs");

            let side_logit3 = sp.side.forward(stage_out);
            let (sh, sw) = (side_logit3.shape()[1], side_logit3.shape()[2]);
            let side_logit = side_logit3
                .into_shape_with_order((sh, sw))
                .expect("one-channel side logit");

            let (proj_hidden_out, emb, emb_norms) = if with_embeddings {
                let mut hidden = sp.proj_hidden.forward(stage_out);
                selu_inplace(&mut hidden);
                let raw = sp.proj_out.forward(&hidden);
                let (emb, norms) = l2_normalize(&raw);
                (Some(hidden), Some(emb), Some(norms))
            } else {
                (None, None, None)
            };

            let (pooled, pool_argmax) = if m + 1 < NUM_STAGES {
                let (p, idx) = maxpool2_ceil(stage_out);
                current = p.clone();
                (Some(p), Some(idx))
            } else {
                (None, None)
            };

            stages.push(StageTrace {
                conv_outs,
                pooled,
                pool_argmax,
                side_logit,
                proj_hidden_out,
                emb,
                emb_norms,
            });
        }

        let side_logit_up: Vec<Array2<f32>> = stages
            .iter()
            .map(|s| bilinear_resize2(&s.side_logit, in_h, in_w))
            .collect();
        let side_probs: Vec<Array2<f32>> = side_logit_up.iter().map(sigmoid2).collect();

        // fusion consumes the pre-sigmoid upsampled side logits
        let mut concat = Array3::<f32>::zeros((NUM_STAGES, in_h, in_w));
        for (m, up) in side_logit_up.iter().enumerate() {
            concat.index_axis_mut(Axis(0), m).assign(up);
        }
        let fused_logit3 = self.params.fuse.forward(&concat);
        let fused_logit = fused_logit3
            .into_shape_with_order((in_h, in_w))
            .expect("one-channel fused logit");
        let fused_prob = sigmoid2(&fused_logit);

        Ok(ForwardTrace {
            input: image.clone(),
            stages,
            side_logit_up,
            side_probs,
            fused_prob,
        })
    }

    /// Backward pass from upstream gradients on the probability maps and
    /// (optionally) the stage embeddings. Accumulates into `grads`.
    pub(crate) fn backward(
        &self,
        trace: &ForwardTrace,
        d_side_probs: &[Array2<f32>],
        d_fused_prob: &Array2<f32>,
        d_embeddings: &[Option<Array3<f32>>],
        grads: &mut ParamSet,
    ) {
        let (in_h, in_w) = trace.fused_prob.dim();

        // fused sigmoid -> fuse conv -> per-side concat gradients
        let d_fused_logit = sigmoid_backward2(d_fused_prob, &trace.fused_prob);
        let mut concat = Array3::<f32>::zeros((NUM_STAGES, in_h, in_w));
        for (m, up) in trace.side_logit_up.iter().enumerate() {
            concat.index_axis_mut(Axis(0), m).assign(up);
        }
        let d_fused_logit3 = d_fused_logit
            .into_shape_with_order((1, in_h, in_w))
            .expect("one-channel fused grad");
        let d_concat = self
            .params
            .fuse
            .backward(&concat, &d_fused_logit3, &mut grads.fuse);

        // per-stage upstream gradient on the stage output (pre-pool)
        let mut d_stage_out: Vec<Array3<f32>> = Vec::with_capacity(NUM_STAGES);
        for (m, sp) in self.params.stages.iter().enumerate() {
            let st = &trace.stages[m];
            let stage_out = st.conv_outs.last().expect("stage has convs");

            // side branch: own sigmoid grad + fusion share, back through
            // the upsampler and the 1x1 side conv
            let mut d_up = sigmoid_backward2(&d_side_probs[m], &trace.side_probs[m]);
            d_up += &d_concat.index_axis(Axis(0), m);
            let (sh, sw) = st.side_logit.dim();
            let d_side_logit = bilinear_backward2(&d_up, sh, sw);
            let d_side_logit3 = d_side_logit
                .into_shape_with_order((1, sh, sw))
                .expect("one-channel side grad");
            let mut d_out = sp.side.backward(stage_out, &d_side_logit3, &mut grads.stages[m].side);

            // embedding branch
            if let Some(d_emb) = &d_embeddings[m] {
                let emb = st.emb.as_ref().expect("embeddings were traced");
                let norms = st.emb_norms.as_ref().expect("embeddings were traced");
                let hidden = st.proj_hidden_out.as_ref().expect("embeddings were traced");
                let d_raw = l2_normalize_backward(d_emb, emb, norms);
                let mut d_hidden =
                    sp.proj_out
                        .backward(hidden, &d_raw, &mut grads.stages[m].proj_out);
                selu_backward_inplace(&mut d_hidden, hidden);
                d_out += &sp.proj_hidden.backward(
                    stage_out,
                    &d_hidden,
                    &mut grads.stages[m].proj_hidden,
                );
            }
            d_stage_out.push(d_out);
        }

        // trunk: walk stages backward, adding the pooled gradient from above
        let mut d_from_above: Option<Array3<f32>> = None;
        for m in (0..NUM_STAGES).rev() {
            let sp = &self.params.stages[m];
            let st = &trace.stages[m];
            let mut dy = d_stage_out[m].clone();
            if let Some(d_pooled_input) = d_from_above.take() {
                let stage_out = st.conv_outs.last().unwrap();
                let (_, oh, ow) = stage_out.dim();
                dy += &maxpool2_backward(
                    &d_pooled_input,
                    st.pool_argmax.as_ref().expect("pool traced"),
                    oh,
                    ow,
                );
            }
            for i in (0..sp.convs.len()).rev() {
                selu_backward_inplace(&mut dy, &st.conv_outs[i]);
                let input = if i == 0 {
                    if m == 0 {
                        &trace.input
                    } else {
                        trace.stages[m - 1].pooled.as_ref().expect("pooled traced")
                    }
                } else {
                    &st.conv_outs[i - 1]
                };
                dy = sp.convs[i].backward(input, &dy, &mut grads.stages[m].convs[i]);
            }
            d_from_above = Some(dy);
        }
    }
}

/// Surface -> (edge, centerline) cascade: the surface prediction becomes an
/// extra input channel for the edge and centerline networks.
pub fn road_cascade_forward(
    surface_model: &CrSeg,
    edge_model: &CrSeg,
    centerline_model: &CrSeg,
    image: &Array3<f32>,
) -> Result<(Array2<f32>, Array2<f32>, Array2<f32>)> {
    let (c, h, w) = image.dim();
    for (name, model) in [("edge", edge_model), ("centerline", centerline_model)] {
        if model.config().in_channels != c + 1 {
            return Err(Error::Argument(format!(
                "{name} model expects {} input channels, cascade provides {}",
                model.config().in_channels,
                c + 1
            )));
        }
    }
    let surface = surface_model.predict(image)?;
    let mut stacked = Array3::<f32>::zeros((c + 1, h, w));
    for ch in 0..c {
        stacked
            .index_axis_mut(Axis(0), ch)
            .assign(&image.index_axis(Axis(0), ch));
    }
    stacked.index_axis_mut(Axis(0), c).assign(&surface);
    let edge = edge_model.predict(&stacked)?;
    let centerline = centerline_model.predict(&stacked)?;
    Ok((surface, edge, centerline))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn small_cfg(in_channels: usize) -> CrSegConfig {
        CrSegConfig {
            in_channels,
            base_width: 8,
            ..CrSegConfig::default()
        }
    }

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = stream(seed, "img", &[]);
        Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>())
    }

    #[test]
    fn backbone_param_count_matches_vgg16_conv_total() {
        let cfg = CrSegConfig {
            in_channels: 3,
            base_width: 64,
            ..CrSegConfig::default()
        };
        assert_eq!(expected_backbone_param_count(&cfg), 14_714_688);
    }

    #[test]
    fn stage_output_shapes_follow_the_architecture() {
        let model = build_crseg(&small_cfg(1), 0).unwrap();
        let out = model.forward(&random_image(1, 64, 64, 1)).unwrap();
        assert_eq!(out.side_probs.len(), 5);
        for side in &out.side_probs {
            assert_eq!(side.dim(), (64, 64));
        }
        assert_eq!(out.fused_prob.dim(), (64, 64));
        let sizes: Vec<usize> = out.stage_embeddings.iter().map(|e| e.shape()[1]).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4]);
        for emb in &out.stage_embeddings {
            assert_eq!(emb.shape()[0], 32);
        }
    }

    #[test]
    fn odd_sizes_use_ceil_mode_and_exact_upsampling() {
        let model = build_crseg(&small_cfg(1), 0).unwrap();
        let out = model.forward(&random_image(1, 450, 450, 2)).unwrap();
        for side in &out.side_probs {
            assert_eq!(side.dim(), (450, 450));
        }
        let sizes: Vec<usize> = out.stage_embeddings.iter().map(|e| e.shape()[1]).collect();
        assert_eq!(sizes, vec![450, 225, 113, 57, 29]);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = build_crseg(&small_cfg(1), 7).unwrap();
        let b = build_crseg(&small_cfg(1), 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_crseg(&small_cfg(1), 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let model = build_crseg(&small_cfg(1), 3).unwrap();
        let img = random_image(1, 48, 48, 4);
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a.fused_prob, b.fused_prob);
        assert!(a.fused_prob.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));

        let zero = Array3::<f32>::zeros((1, 48, 48));
        let z = model.forward(&zero).unwrap();
        assert!(z.fused_prob.iter().all(|v| v.is_finite()));
        for emb in &z.stage_embeddings {
            assert!(emb.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn embeddings_are_unit_normalized() {
        let model = build_crseg(&small_cfg(1), 5).unwrap();
        let out = model.forward(&random_image(1, 32, 32, 6)).unwrap();
        for emb in &out.stage_embeddings {
            let (d, h, w) = emb.dim();
            for y in 0..h {
                for x in 0..w {
                    let n: f32 = (0..d).map(|c| emb[[c, y, x]] * emb[[c, y, x]]).sum();
                    assert!((n.sqrt() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn too_small_input_is_an_argument_error() {
        let model = build_crseg(&small_cfg(1), 0).unwrap();
        assert!(matches!(
            model.forward(&Array3::<f32>::zeros((1, 8, 8))),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn backward_reaches_every_stage() {
        let model = build_crseg(&small_cfg(1), 9).unwrap();
        let img = random_image(1, 32, 32, 10);
        let trace = model.forward_trace(&img, true).unwrap();
        let mut grads = model.params.zeros_like();

        let d_side: Vec<Array2<f32>> = (0..NUM_STAGES)
            .map(|_| Array2::from_elem((32, 32), 1.0))
            .collect();
        let d_fused = Array2::from_elem((32, 32), 1.0);
        let d_embs: Vec<Option<Array3<f32>>> = (0..NUM_STAGES)
            .map(|m| Some(Array3::from_elem(trace.embedding(m).raw_dim(), 0.1)))
            .collect();
        model.backward(&trace, &d_side, &d_fused, &d_embs, &mut grads);

        for (m, sg) in grads.stages.iter().enumerate() {
            for (i, conv) in sg.convs.iter().enumerate() {
                assert!(
                    conv.w.iter().any(|&g| g != 0.0),
                    "stage {m} conv {i} got no gradient"
                );
            }
            assert!(sg.side.w.iter().any(|&g| g != 0.0));
            assert!(sg.proj_hidden.w.iter().any(|&g| g != 0.0));
            assert!(sg.proj_out.w.iter().any(|&g| g != 0.0));
        }
        assert!(grads.fuse.w.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn network_backward_matches_finite_differences_on_a_probe() {
        // scalar probe: weighted sum of fused probabilities
        let model = build_crseg(&small_cfg(1), 11).unwrap();
        let img = random_image(1, 16, 16, 12);
        let mut rng = stream(13, "probe", &[]);
        let pw = Array2::from_shape_fn((16, 16), |_| rng.random::<f32>() * 2.0 - 1.0);

        let loss = |m: &CrSeg| -> f32 {
            m.predict(&img)
                .unwrap()
                .iter()
                .zip(pw.iter())
                .map(|(p, w)| p * w)
                .sum()
        };

        let trace = model.forward_trace(&img, false).unwrap();
        let mut grads = model.params.zeros_like();
        let d_side: Vec<Array2<f32>> = (0..NUM_STAGES)
            .map(|_| Array2::zeros((16, 16)))
            .collect();
        let d_embs: Vec<Option<Array3<f32>>> = vec![None; NUM_STAGES];
        model.backward(&trace, &d_side, &pw, &d_embs, &mut grads);

        // probe a handful of parameters spread across the net
        let step = 1e-2;
        let checks: Vec<(usize, usize)> = vec![(0, 0), (1, 1), (2, 0), (3, 2), (4, 2)];
        for (stage, conv_idx) in checks {
            let analytic = grads.stages[stage].convs[conv_idx].w[[0, 0, 1, 1]];
            let mut plus = model.clone();
            plus.params.stages[stage].convs[conv_idx].w[[0, 0, 1, 1]] += step;
            let mut minus = model.clone();
            minus.params.stages[stage].convs[conv_idx].w[[0, 0, 1, 1]] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let denom = fd.abs().max(analytic.abs()).max(1e-3);
            assert!(
                (fd - analytic).abs() / denom < 5e-2,
                "stage {stage} conv {conv_idx}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn road_cascade_shapes_and_information_flow() {
        let surface = build_crseg(&small_cfg(1), 20).unwrap();
        let edge = build_crseg(&small_cfg(2), 21).unwrap();
        let centerline = build_crseg(&small_cfg(2), 22).unwrap();
        let img = random_image(1, 32, 32, 23);

        let (s, e, c) = road_cascade_forward(&surface, &edge, &centerline, &img).unwrap();
        assert_eq!(s.dim(), (32, 32));
        assert_eq!(e.dim(), (32, 32));
        assert_eq!(c.dim(), (32, 32));
        let (s2, e2, c2) = road_cascade_forward(&surface, &edge, &centerline, &img).unwrap();
        assert_eq!((s, e.clone(), c), (s2, e2, c2));

        // zeroing the surface channel changes the edge output: the cascade
        // actually feeds the prediction forward
        let mut stacked = Array3::<f32>::zeros((2, 32, 32));
        stacked
            .index_axis_mut(Axis(0), 0)
            .assign(&img.index_axis(Axis(0), 0));
        let edge_without_surface = edge.predict(&stacked).unwrap();
        assert_ne!(e, edge_without_surface);

        // channel mismatch is rejected
        let bad_edge = build_crseg(&small_cfg(1), 24).unwrap();
        assert!(matches!(
            road_cascade_forward(&surface, &bad_edge, &centerline, &img),
            Err(Error::Argument(_))
        ));
    }
}
