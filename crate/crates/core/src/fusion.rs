//! Explicit modulation: blend style tokens with multimodal tokens and append
//! the result to the text tokens as the prompt sequence.

use crate::error::{contract, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_ADAPTER_SCALE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    /// Weight of the style tokens in the blend; `1 - alpha` goes to the multimodal tokens.
    pub alpha: f64,
    /// Strength of the fused tokens inside the denoiser's cross-attention.
    pub adapter_scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: DEFAULT_ALPHA,
            adapter_scale: DEFAULT_ADAPTER_SCALE,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("alpha", self.alpha)?;
        check_unit("adapter_scale", self.adapter_scale)
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(contract(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// `E_F = alpha * E_I + (1 - alpha) * E_mm`. The endpoints return the
/// corresponding input unchanged.
pub fn interpolate<T: Real>(g: &mut Graph<T>, style: Var, multimodal: Var, alpha: f64) -> Result<Var> {
    check_unit("alpha", alpha)?;
    if g.shape(style) != g.shape(multimodal) {
        return Err(dim_err(format!(
            "interpolate: {:?} vs {:?}",
            g.shape(style),
            g.shape(multimodal)
        )));
    }
    if alpha == 1.0 {
        return Ok(style);
    }
    if alpha == 0.0 {
        return Ok(multimodal);
    }
    let a = g.scale(style, T::c(alpha))?;
    let b = g.scale(multimodal, T::c(1.0 - alpha))?;
    g.add(a, b)
}

/// Which positions of a prompt sequence came from text and which from the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub text: usize,
    pub fused: usize,
}

impl Provenance {
    /// Per-token attention multipliers: 1 for text tokens, `adapter_scale` for fused ones.
    pub fn key_weights<T: Real>(&self, adapter_scale: f64) -> Vec<T> {
        std::iter::repeat(T::one())
            .take(self.text)
            .chain(std::iter::repeat(T::c(adapter_scale)).take(self.fused))
            .collect()
    }
}

/// Prompt sequence `E_P = [E_T ; E_F]` along the token axis. `None` for the
/// fused tokens (adapter disabled) yields `E_T` itself.
pub fn build_prompt<T: Real>(g: &mut Graph<T>, text: Var, fused: Option<Var>) -> Result<(Var, Provenance)> {
    let st = g.shape(text).to_vec();
    if st.len() != 3 {
        return Err(dim_err(format!("prompt text tokens must be [B, M, D], got {st:?}")));
    }
    match fused {
        None => Ok((text, Provenance { text: st[1], fused: 0 })),
        Some(f) => {
            let sf = g.shape(f).to_vec();
            if sf.len() != 3 || sf[0] != st[0] || sf[2] != st[2] {
                return Err(dim_err(format!(
                    "prompt: text {st:?} and fused {sf:?} tokens disagree"
                )));
            }
            let p = g.concat(&[text, f], 1)?;
            Ok((p, Provenance { text: st[1], fused: sf[1] }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn endpoints_are_exact() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_f64([1, 1, 3], &[0.1, -0.0, 3.0]).unwrap());
        let b = g.constant(Tensor::from_f64([1, 1, 3], &[-0.0, 7.0, 1e-30]).unwrap());
        let one = interpolate(&mut g, a, b, 1.0).unwrap();
        let zero = interpolate(&mut g, a, b, 0.0).unwrap();
        let bits = |g: &Graph<f32>, v: Var| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g, one), bits(&g, a));
        assert_eq!(bits(&g, zero), bits(&g, b));
    }

    #[test]
    fn default_alpha_example() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([1, 1, 2], &[1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::from_f64([1, 1, 2], &[0.0, 1.0]).unwrap());
        let f = interpolate(&mut g, a, b, FusionConfig::default().alpha).unwrap();
        let v = g.value(f).data();
        assert!((v[0] - 0.8).abs() < 1e-15 && (v[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_alpha_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 3, 2]));
        assert!(matches!(interpolate(&mut g, a, a, 1.5), Err(crate::Error::Contract(_))));
        assert!(matches!(interpolate(&mut g, a, b, 0.5), Err(crate::Error::Dimension(_))));
        assert!(FusionConfig { alpha: 0.5, adapter_scale: -0.1 }.validate().is_err());
    }

    #[test]
    fn prompt_concatenates_text_first() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::from_fn([1, 2, 2], |i| i as f64));
        let f = g.constant(Tensor::from_fn([1, 3, 2], |i| 10.0 + i as f64));
        let (p, prov) = build_prompt(&mut g, t, Some(f)).unwrap();
        assert_eq!(prov, Provenance { text: 2, fused: 3 });
        assert_eq!(g.shape(p), &[1, 5, 2]);
        let head = g.slice(p, 1, 0, 2).unwrap();
        let tail = g.slice(p, 1, 2, 3).unwrap();
        assert_eq!(g.value(head), g.value(t));
        assert_eq!(g.value(tail), g.value(f));
        let (only, prov) = build_prompt(&mut g, t, None).unwrap();
        assert_eq!(only, t);
        assert_eq!(prov.fused, 0);
        assert_eq!(prov.key_weights::<f64>(0.6), vec![1.0, 1.0]);
        let d = g.constant(Tensor::zeros([1, 3, 4]));
        assert!(build_prompt(&mut g, t, Some(d)).is_err());
    }
}
