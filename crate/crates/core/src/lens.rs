//! Logit lens: read an intermediate residual state as a vocabulary
//! distribution, `softmax(W_U h / τ)`, optionally through the model's final
//! layernorm first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoundParams, ForwardTrace, ModelError, Transformer, LAYERNORM_EPS};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LensError {
    #[error("layer {layer} out of range 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("lens temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("apply_final_norm requested without final norm parameters")]
    MissingFinalNorm,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LensError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensConfig {
    /// Pass `h` through the final layernorm before unembedding. Off by
    /// default: the bare `W_U h` projection.
    pub apply_final_norm: bool,
    pub temperature: f64,
}

impl Default for LensConfig {
    fn default() -> Self {
        Self {
            apply_final_norm: false,
            temperature: 1.0,
        }
    }
}

impl LensConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LensError::Temperature(self.temperature));
        }
        Ok(())
    }
}

/// The pieces of a model the lens reads.
#[derive(Debug, Clone, Copy)]
pub struct Unembedding<'a> {
    /// `[V, d]`
    pub w_u: &'a Tensor,
    /// Final layernorm `(gain, bias)`.
    pub final_norm: Option<(&'a Tensor, &'a Tensor)>,
}

impl<'a> Unembedding<'a> {
    pub fn bare(w_u: &'a Tensor) -> Self {
        Self { w_u, final_norm: None }
    }

    pub fn of(model: &'a Transformer) -> Self {
        let gain = model.param("lnf.g").expect("lnf.g in manifest");
        let bias = model.param("lnf.b").expect("lnf.b in manifest");
        Self {
            w_u: model.unembedding(),
            final_norm: Some((gain, bias)),
        }
    }
}

fn lens_on_graph(g: &mut Graph, h: Var, w_u: Var, final_norm: Option<(Var, Var)>, cfg: &LensConfig) -> Result<Var> {
    cfg.validate()?;
    let x = match (cfg.apply_final_norm, final_norm) {
        (false, _) => h,
        (true, Some((gain, bias))) => g.layernorm(h, gain, bias, LAYERNORM_EPS)?,
        (true, None) => return Err(LensError::MissingFinalNorm),
    };
    let mut logits = g.matmul_bt(x, w_u)?;
    if cfg.temperature != 1.0 {
        logits = g.scale(logits, 1.0 / cfg.temperature)?;
    }
    Ok(g.softmax(logits)?)
}

/// Lens over a hidden state already on `g`, using the model's bound
/// unembedding so gradients reach `W_U` when it is trainable.
pub fn lens_graph(g: &mut Graph, model: &Transformer, params: &BoundParams, h: Var, cfg: &LensConfig) -> Result<Var> {
    let w_u = params.get(model.config().unembedding_name());
    let norm = (params.get("lnf.g"), params.get("lnf.b"));
    lens_on_graph(g, h, w_u, Some(norm), cfg)
}

/// Distribution over the vocabulary for every row of `h[.., d]`.
pub fn logit_lens(h: &Tensor, unembed: &Unembedding<'_>, cfg: &LensConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let w_u = g.constant(unembed.w_u.clone());
    let norm = unembed
        .final_norm
        .map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone())));
    let out = lens_on_graph(&mut g, hv, w_u, norm, cfg)?;
    Ok(g.value(out).clone())
}

/// One distribution tensor per requested layer (1-based, `1..=n_layers`),
/// in request order.
pub fn lens_all_layers(
    trace: &ForwardTrace,
    model: &Transformer,
    layer_ids: &[usize],
    cfg: &LensConfig,
) -> Result<Vec<Tensor>> {
    let n_layers = trace.hidden_states.len() - 1;
    if let Some(&layer) = layer_ids.iter().find(|&&l| l == 0 || l > n_layers) {
        return Err(LensError::LayerOutOfRange { layer, n_layers });
    }
    let unembed = Unembedding::of(model);
    layer_ids
        .iter()
        .map(|&l| logit_lens(&trace.hidden_states[l], &unembed, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{softmax_rows, ModelConfig};
    use crate::rng::Rng;
    use rand::SeedableRng;

    fn model(layers: usize) -> Transformer {
        let cfg = ModelConfig {
            n_layers: layers,
            d_model: 8,
            n_heads: 2,
            vocab_size: 9,
            max_seq_len: 8,
            tie_unembedding: false,
        };
        Transformer::init(cfg, &mut Rng::seed_from_u64(21)).unwrap()
    }

    #[test]
    fn zero_state_gives_uniform() {
        let w = Tensor::randn(&[5, 3], 1.0, &mut Rng::seed_from_u64(0));
        let d = logit_lens(&Tensor::zeros(&[1, 3]), &Unembedding::bare(&w), &LensConfig::default()).unwrap();
        assert!(d.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn closed_form_three_token_case() {
        let w = Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 0., 0.]).unwrap();
        let h = Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let d = logit_lens(&h, &Unembedding::bare(&w), &LensConfig::default()).unwrap();
        for (a, b) in d.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_and_bad_config() {
        let w = Tensor::zeros(&[3, 2]);
        let h = Tensor::zeros(&[1, 4]);
        assert!(logit_lens(&h, &Unembedding::bare(&w), &LensConfig::default()).is_err());
        let h = Tensor::zeros(&[1, 2]);
        let normed = LensConfig {
            apply_final_norm: true,
            ..LensConfig::default()
        };
        assert!(matches!(
            logit_lens(&h, &Unembedding::bare(&w), &normed),
            Err(LensError::MissingFinalNorm)
        ));
        let cold = LensConfig {
            temperature: 0.0,
            ..LensConfig::default()
        };
        assert!(matches!(
            logit_lens(&h, &Unembedding::bare(&w), &cold),
            Err(LensError::Temperature(_))
        ));
    }

    #[test]
    fn final_layer_with_norm_reproduces_model_output() {
        let m = model(3);
        let trace = m.forward_with_states(&[vec![1, 4, 2, 7], vec![0, 0, 3, 8]]).unwrap();
        let cfg = LensConfig {
            apply_final_norm: true,
            ..LensConfig::default()
        };
        let lensed = lens_all_layers(&trace, &m, &[3], &cfg).unwrap();
        let direct = softmax_rows(&trace.logits);
        assert!(lensed[0].max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn layer_selection() {
        let m = model(12);
        let trace = m.forward_with_states(&[vec![1, 2, 3]]).unwrap();
        let cfg = LensConfig::default();
        assert!(lens_all_layers(&trace, &m, &[], &cfg).unwrap().is_empty());
        let five = lens_all_layers(&trace, &m, &[2, 4, 6, 8, 10], &cfg).unwrap();
        assert_eq!(five.len(), 5);
        for d in &five {
            for r in 0..d.rows() {
                assert!((d.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(d.row(r).iter().all(|&p| p >= 0.0));
            }
        }
        assert!(matches!(
            lens_all_layers(&trace, &m, &[0], &cfg),
            Err(LensError::LayerOutOfRange { layer: 0, .. })
        ));
        assert!(lens_all_layers(&trace, &m, &[13], &cfg).is_err());
    }

    #[test]
    fn positive_rescaling_preserves_argmax() {
        let mut rng = Rng::seed_from_u64(8);
        let w = Tensor::randn(&[7, 4], 1.0, &mut rng);
        let h = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let base = logit_lens(&h, &Unembedding::bare(&w), &LensConfig::default()).unwrap();
        for alpha in [0.1, 0.5, 2.0, 10.0] {
            let scaled = Tensor::new(h.shape().to_vec(), h.data().iter().map(|x| x * alpha).collect()).unwrap();
            let d = logit_lens(&scaled, &Unembedding::bare(&w), &LensConfig::default()).unwrap();
            for r in 0..6 {
                assert_eq!(crate::model::argmax(d.row(r)), crate::model::argmax(base.row(r)));
            }
            if alpha != 1.0 {
                assert!(d.max_abs_diff(&base) > 1e-6);
            }
        }
    }
}
