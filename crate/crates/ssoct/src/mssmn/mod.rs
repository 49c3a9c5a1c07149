//! Multiscale-Spectral-Spatial-Magnification Network (MSSMN).
//!
//! One parameter set serves every magnification factor pair
//! `(l_hat, m_hat)` in the supported envelope: a feature extractor runs at
//! the acquisition scale, a meta-restoration module predicts a depthwise
//! kernel per channel from the factors (applied with a residual skip), and
//! a meta-upscaling module predicts one reconstruction kernel per distinct
//! position vector. Output pixel `(w, h)` contracts the predicted kernel
//! with the k x k neighborhood of the restored features at
//! `(floor(w / m_hat), floor(h / m_hat))`, so output dims are
//! `floor(m_hat * H) x floor(m_hat * W)`.

mod checkpoint;
mod extractor;
mod meta;

pub use checkpoint::{load_model, save_model};
pub use extractor::{ExtractorConfig, ExtractorKind};
pub use meta::MetaConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{Factors, OctImage, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{MapGeometry, ParamSet, Tape, Tensor, Var};
use crate::scale;

use extractor::ExtractorIdx;
use meta::MetaIdx;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub meta: MetaConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if self.meta.phi_r_hidden == 0 || self.meta.phi_u_hidden == 0 {
            return Err(Error::InvalidConfig("meta hidden sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Position vector of Eq-style meta-upscaling:
/// `(w/m - floor(w/m), h/m - floor(h/m), l)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionVector {
    pub frac_w: f64,
    pub frac_h: f64,
    pub l_hat: f64,
}

/// Fractional offsets of the output pixel within its source cell, plus the
/// spectral magnification factor passed through raw.
pub fn compute_position_vector(w: usize, h: usize, m_hat: f64, l_hat: f64) -> PositionVector {
    PositionVector {
        frac_w: scale::fractional_offset(w, m_hat),
        frac_h: scale::fractional_offset(h, m_hat),
        l_hat,
    }
}

/// The reconstruction network: configuration plus all trainable blocks
/// (extractor, restoration predictor, upscaling predictor, output bias).
#[derive(Debug, Clone)]
pub struct Mssmn {
    config: ModelConfig,
    pub params: ParamSet,
    extractor: ExtractorIdx,
    meta: MetaIdx,
}

impl Mssmn {
    /// Initializes all weights uniformly in `±sqrt(6 / fan_in)` (biases
    /// zero) from a ChaCha8 stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let extractor = ExtractorIdx::register(&config.extractor, &mut params, &mut rng);
        let meta = MetaIdx::register(
            &config.meta,
            config.extractor.k,
            config.extractor.f_c,
            &mut params,
            &mut rng,
        );
        Ok(Mssmn { config, params, extractor, meta })
    }

    /// Rebuilds the index layout for a known config without touching values
    /// (used by the checkpoint loader).
    pub(crate) fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::new(config, 0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total trainable scalar count; a pure function of the config.
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Extractor stage: `B x 1 x H x W -> B x f_c x H x W`.
    pub fn extract_features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.extractor.forward(&self.config.extractor, tape, &self.params, x)
    }

    /// Restoration kernels `f_c x k x k` predicted from the factor pair.
    pub fn predict_restoration_weights(&self, tape: &mut Tape, l_hat: f64, m_hat: f64) -> Result<Var> {
        validate_factors(l_hat, m_hat)?;
        self.meta.predict_restoration(
            tape,
            &self.params,
            self.config.extractor.k,
            self.config.extractor.f_c,
            l_hat,
            m_hat,
        )
    }

    /// `F_R = depthwise(F, W_R) + F`; the residual skip keeps the identity
    /// path alive when the predicted kernels are near zero.
    pub fn restore_features(&self, tape: &mut Tape, features: Var, w_r: Var) -> Result<Var> {
        let pad = self.config.extractor.padding();
        let restored = tape.depthwise_conv2d(features, w_r, pad)?;
        tape.add(restored, features)
    }

    /// Geometry plus the distinct-position-vector tensor for an
    /// `in_h x in_w` feature map magnified by `m_hat`.
    pub fn map_geometry(
        &self,
        in_h: usize,
        in_w: usize,
        m_hat: f64,
        l_hat: f64,
    ) -> Result<(MapGeometry, Tensor)> {
        let out_h = scale::upscale_len(in_h, m_hat);
        let out_w = scale::upscale_len(in_w, m_hat);
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "map_features",
                format!("output {}x{} must be at least 1x1", out_h, out_w),
            ));
        }
        let src_row = scale::upscale_source_indices(out_h, in_h, m_hat);
        let src_col = scale::upscale_source_indices(out_w, in_w, m_hat);
        let (krow_idx, fracs_row) = dedup_fracs(out_h, m_hat);
        let (kcol_idx, fracs_col) = dedup_fracs(out_w, m_hat);
        let n_vrow = fracs_row.len();
        let n_vcol = fracs_col.len();

        // Bank rows enumerate (col frac, row frac) pairs, column-major to
        // match kernel index `kcol * n_vrow + krow`.
        let mut v = Vec::with_capacity(n_vrow * n_vcol * 3);
        for &fw in &fracs_col {
            for &fh in &fracs_row {
                v.extend_from_slice(&[fw, fh, l_hat]);
            }
        }
        let geom = MapGeometry {
            out_h,
            out_w,
            in_h,
            in_w,
            k: self.config.extractor.k,
            channels: self.config.extractor.f_c,
            src_row,
            src_col,
            krow_idx,
            kcol_idx,
            n_vrow,
            n_vcol,
        };
        let v = Tensor::new(vec![n_vrow * n_vcol, 3], v)?;
        Ok((geom, v))
    }

    /// Full forward on the tape: returns the unclamped
    /// `B x 1 x floor(m_hat H) x floor(m_hat W)` output node.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        input: Tensor,
        l_hat: f64,
        m_hat: f64,
    ) -> Result<Var> {
        self.forward_graph_with(tape, &self.params, input, l_hat, m_hat)
    }

    /// Forward pass reading weights from an external parameter set laid out
    /// like this model's (same config); the gradient-check oracle perturbs
    /// that set between evaluations.
    pub fn forward_graph_with(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        input: Tensor,
        l_hat: f64,
        m_hat: f64,
    ) -> Result<Var> {
        validate_factors(l_hat, m_hat)?;
        let shape = tape_input_shape(&input)?;
        let x = tape.constant(input);
        let features = self.extractor.forward(&self.config.extractor, tape, params, x)?;
        let w_r = self.meta.predict_restoration(
            tape,
            params,
            self.config.extractor.k,
            self.config.extractor.f_c,
            l_hat,
            m_hat,
        )?;
        let pad = self.config.extractor.padding();
        let conv = tape.depthwise_conv2d(features, w_r, pad)?;
        let restored = tape.add(conv, features)?;
        let (geom, v) = self.map_geometry(shape.2, shape.3, m_hat, l_hat)?;
        let kbank = self.meta.kernel_bank(tape, params, v)?;
        let bias = tape.param(params, self.meta.out_bias);
        tape.map_features(restored, kbank, bias, geom)
    }

    /// Inference entry point: reconstructs an image at the requested
    /// factors and clamps the pixels to [0, 1] (the clamp exists only
    /// outside the training loss).
    pub fn reconstruct(&self, image: &OctImage, l_hat: f64, m_hat: f64) -> Result<OctImage> {
        let mut tape = Tape::new();
        let input = image_to_tensor(image);
        let out = self.forward_graph(&mut tape, input, l_hat, m_hat)?;
        let value = tape.value(out);
        let (h, w) = (value.shape()[2], value.shape()[3]);
        let pixels: Vec<f64> = value.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let mut img = OctImage::new(
            h,
            w,
            pixels,
            Provenance::Reconstructed(Factors::new(l_hat, m_hat)?),
        )?;
        img.axial_pixel_pitch = image.axial_pixel_pitch / m_hat;
        img.lateral_pixel_pitch = image.lateral_pixel_pitch / m_hat;
        Ok(img)
    }
}

fn validate_factors(l_hat: f64, m_hat: f64) -> Result<()> {
    if !(l_hat.is_finite() && m_hat.is_finite() && l_hat >= 1.0 && m_hat >= 1.0) {
        return Err(Error::arg(
            "forward",
            format!("magnification factors must be >= 1, got ({}, {})", l_hat, m_hat),
        ));
    }
    Ok(())
}

fn tape_input_shape(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[b, c, h, w] if c == 1 => Ok((b, c, h, w)),
        s => Err(Error::shape("forward", format!("expected B x 1 x H x W input, got {:?}", s))),
    }
}

/// Deduplicated fractional offsets along one axis: per output index the
/// id of its distinct offset, plus the distinct values in first-seen order.
fn dedup_fracs(out_len: usize, m_hat: f64) -> (Vec<usize>, Vec<f64>) {
    let mut ids = Vec::with_capacity(out_len);
    let mut values: Vec<f64> = Vec::new();
    let mut lookup: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    for i in 0..out_len {
        let frac = scale::fractional_offset(i, m_hat);
        let id = *lookup.entry(frac.to_bits()).or_insert_with(|| {
            values.push(frac);
            values.len() - 1
        });
        ids.push(id);
    }
    (ids, values)
}

/// `1 x 1 x H x W` tensor view of an image.
pub fn image_to_tensor(image: &OctImage) -> Tensor {
    Tensor::new(vec![1, 1, image.height(), image.width()], image.pixels().to_vec())
        .expect("image dims are valid tensor dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                kind: ExtractorKind::Rcan,
                f_c: 4,
                n_groups: 1,
                n_blocks_per_group: 1,
                attention_reduction: 2,
                k: 3,
            },
            meta: MetaConfig { phi_r_hidden: 8, phi_u_hidden: 8 },
        }
    }

    fn random_input(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 1, h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn position_vector_examples() {
        let v = compute_position_vector(3, 5, 2.0, 3.0);
        assert_eq!((v.frac_w, v.frac_h, v.l_hat), (0.5, 0.5, 3.0));
        let v = compute_position_vector(0, 0, 3.7, 2.2);
        assert_eq!((v.frac_w, v.frac_h, v.l_hat), (0.0, 0.0, 2.2));
        let v = compute_position_vector(4, 0, 2.5, 2.0);
        assert!((v.frac_w - 0.6).abs() < 1e-12);
        assert_eq!(v.frac_h, 0.0);
        assert_eq!(v.l_hat, 2.0);
    }

    #[test]
    fn extractor_output_shape() {
        let config = ModelConfig {
            extractor: ExtractorConfig { f_c: 16, ..ExtractorConfig::default() },
            ..ModelConfig::default()
        };
        let model = Mssmn::new(config, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(64, 64, 2));
        let f = model.extract_features(&mut tape, x).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 16, 64, 64]);
    }

    #[test]
    fn zero_weights_give_zero_feature_map() {
        let mut model = Mssmn::new(tiny_config(), 1).unwrap();
        for block in model.params.blocks_mut() {
            block.value.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(random_input(8, 8, 3));
        let f = model.extract_features(&mut tape, x).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extractor_is_deterministic() {
        let model = Mssmn::new(tiny_config(), 9).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(random_input(10, 12, 4));
            let f = model.extract_features(&mut tape, x).unwrap();
            tape.value(f).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plain_residual_extractor_works_and_is_smaller() {
        let rcan = Mssmn::new(tiny_config(), 1).unwrap();
        let mut cfg = tiny_config();
        cfg.extractor.kind = ExtractorKind::PlainResidual;
        let plain = Mssmn::new(cfg, 1).unwrap();
        assert!(plain.num_parameters() < rcan.num_parameters());
        let mut tape = Tape::new();
        let x = tape.constant(random_input(8, 8, 5));
        let f = plain.extract_features(&mut tape, x).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn restoration_weight_count_at_desk_defaults() {
        let config = ModelConfig {
            extractor: ExtractorConfig { f_c: 16, ..ExtractorConfig::default() },
            ..ModelConfig::default()
        };
        let model = Mssmn::new(config, 1).unwrap();
        let mut tape = Tape::new();
        let w_r = model.predict_restoration_weights(&mut tape, 2.0, 3.0).unwrap();
        assert_eq!(tape.value(w_r).shape(), &[16, 3, 3]);
        assert_eq!(tape.value(w_r).len(), 144);
    }

    #[test]
    fn zero_meta_params_give_zero_restoration_weights_and_identity_restore() {
        let mut model = Mssmn::new(tiny_config(), 1).unwrap();
        // Zero only the restoration predictor blocks.
        for block in model.params.blocks_mut() {
            if block.name.starts_with("meta.phi_r") {
                block.value.fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let w_r = model.predict_restoration_weights(&mut tape, 2.0, 2.0).unwrap();
        assert!(tape.value(w_r).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(random_input(8, 8, 6));
        let f = model.extract_features(&mut tape, x).unwrap();
        let restored = model.restore_features(&mut tape, f, w_r).unwrap();
        assert_eq!(tape.value(restored).data(), tape.value(f).data());
        assert_eq!(tape.value(restored).shape(), tape.value(f).shape());
    }

    #[test]
    fn fd_restoration_weights_into_phi_r() {
        let model = Mssmn::new(tiny_config(), 11).unwrap();
        let mut params = model.params.clone();
        let meta = model.meta.clone();
        let err = finite_difference_check(&mut params, 1e-4, move |tape, p| {
            let w_r = meta.predict_restoration(tape, p, 3, 4, 2.0, 3.0)?;
            Ok(tape.sum(w_r))
        })
        .unwrap();
        assert!(err <= 1e-4, "phi_r fd error {}", err);
    }

    #[test]
    fn geometry_distinct_vectors_integer_m() {
        let model = Mssmn::new(tiny_config(), 1).unwrap();
        for m in [2usize, 3, 4] {
            let (geom, v) = model.map_geometry(32, 32, m as f64, 2.0).unwrap();
            assert_eq!(v.shape()[0], m * m, "m={}", m);
            assert_eq!(geom.n_kernels(), m * m);
        }
    }

    #[test]
    fn geometry_fracs_in_unit_interval() {
        let model = Mssmn::new(tiny_config(), 1).unwrap();
        for m in [1.0, 1.5, 2.5, 3.3, 4.5] {
            let (_, v) = model.map_geometry(17, 23, m, 1.5).unwrap();
            for row in v.data().chunks(3) {
                assert!((0.0..1.0).contains(&row[0]));
                assert!((0.0..1.0).contains(&row[1]));
                assert_eq!(row[2], 1.5);
            }
        }
    }

    #[test]
    fn forward_shape_law() {
        let model = Mssmn::new(tiny_config(), 13).unwrap();
        for (h, w, m, eh, ew) in [
            (32usize, 32usize, 1.0f64, 32usize, 32usize),
            (32, 32, 2.0, 64, 64),
            (32, 32, 2.5, 80, 80),
            (16, 24, 3.5, 56, 84),
        ] {
            let mut tape = Tape::new();
            let out = model.forward_graph(&mut tape, random_input(h, w, 7), 2.0, m).unwrap();
            assert_eq!(tape.value(out).shape(), &[1, 1, eh, ew], "m={}", m);
        }
    }

    #[test]
    fn factors_reach_the_output() {
        let model = Mssmn::new(tiny_config(), 17).unwrap();
        let input = random_input(12, 12, 8);
        let eval = |l: f64, m: f64| {
            let mut tape = Tape::new();
            let out = model.forward_graph(&mut tape, input.clone(), l, m).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = eval(2.0, 3.0);
        let b = eval(3.0, 3.0);
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b, "spectral factor must influence the output");
    }

    #[test]
    fn reconstruct_clamps_and_sets_provenance() {
        let model = Mssmn::new(tiny_config(), 19).unwrap();
        let img = OctImage::new(
            16,
            16,
            (0..256).map(|i| (i % 9) as f64 / 9.0).collect(),
            Provenance::Reference,
        )
        .unwrap();
        let out = model.reconstruct(&img, 2.0, 2.5).unwrap();
        assert_eq!((out.height(), out.width()), (40, 40));
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(out.provenance, Provenance::Reconstructed(f)
            if f.l == 2.0 && f.m == 2.5));
    }

    #[test]
    fn forward_rejects_bad_factors() {
        let model = Mssmn::new(tiny_config(), 1).unwrap();
        let mut tape = Tape::new();
        assert!(model.forward_graph(&mut tape, random_input(8, 8, 1), 0.5, 2.0).is_err());
        assert!(model.forward_graph(&mut tape, random_input(8, 8, 1), 2.0, f64::NAN).is_err());
    }

    #[test]
    fn parameter_count_is_config_pure() {
        let a = Mssmn::new(tiny_config(), 1).unwrap();
        let b = Mssmn::new(tiny_config(), 999).unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
    }

    /// End-to-end gradient fidelity including the second-order path through
    /// the predicted restoration and upscaling weights.
    #[test]
    fn fd_full_model_with_l1_loss() {
        use rand::{Rng, SeedableRng};
        let model = Mssmn::new(tiny_config(), 23).unwrap();
        let mut params = model.params.clone();
        // Seeds picked so that no probe crosses a relu or L1 kink (kink
        // points are excluded from the check, not differentiated), and
        // targets stay away from the near-zero initial output.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let input = Tensor::new(
            vec![1, 1, 6, 6],
            (0..36).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let target = Tensor::new(
            vec![1, 1, 9, 9],
            (0..81).map(|_| rng.gen_range(0.2..0.9)).collect(),
        )
        .unwrap();
        let skeleton = Mssmn::skeleton(tiny_config()).unwrap();
        let err = finite_difference_check(&mut params, 1e-4, move |tape, p| {
            let out = skeleton.forward_graph_with(tape, p, input.clone(), 2.0, 1.5)?;
            let t = tape.constant(target.clone());
            tape.l1_loss(out, t)
        })
        .unwrap();
        assert!(err <= 1e-3, "full-model fd error {}", err);
    }
}
