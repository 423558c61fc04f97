use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{layer_index, BoundAdapters, ModelParams, Slot, INIT_STD};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Projection kinds to adapt in every layer: `q`, `k`, `v`, `o`,
    /// `mlp_in`, `mlp_out`.
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            targets: vec!["q".into(), "v".into()],
            seed: 0,
        }
    }
}

fn slot_for(kind: &str) -> Option<Slot> {
    Some(match kind {
        "q" => Slot::Query,
        "k" => Slot::Key,
        "v" => Slot::Value,
        "o" => Slot::Output,
        "mlp_in" => Slot::MlpIn,
        "mlp_out" => Slot::MlpOut,
        _ => return None,
    })
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.rank == 0 {
            problems.push("lora.rank must be positive".to_string());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            problems.push("lora.alpha must be a positive number".to_string());
        }
        if self.targets.is_empty() {
            problems.push("lora.targets must name at least one projection".to_string());
        }
        for t in &self.targets {
            if slot_for(t).is_none() {
                problems.push(format!("lora.targets: unknown projection {t:?}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Low-rank delta for one weight `W [d×k]`: `A [r×k]`, `B [d×r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Scalar = f32> {
    pub target: String,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters<T: Scalar = f32> {
    pub rank: usize,
    pub alpha: f64,
    pub adapters: Vec<LoraAdapter<T>>,
}

impl<T: Scalar> LoraAdapters<T> {
    /// `A ~ N(0, 0.02)`, `B = 0`, so the adapted model starts identical to the base.
    pub fn init(params: &ModelParams<T>, config: &LoraConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut adapters = Vec::new();
        for layer in 0..params.config.n_layers {
            for kind in &config.targets {
                let slot = slot_for(kind).expect("validated");
                let idx = layer_index(layer, slot);
                let target = params.names()[idx].clone();
                let (d, k) = {
                    let s = params.tensors()[idx].shape();
                    (s[0], s[1])
                };
                if config.rank > d.min(k) {
                    return Err(Error::Config(vec![format!(
                        "lora.rank {} exceeds min dimension {} of {target}",
                        config.rank,
                        d.min(k)
                    )]));
                }
                let a = (0..config.rank * k)
                    .map(|_| T::lit(normal.sample(&mut rng)))
                    .collect();
                adapters.push(LoraAdapter {
                    target,
                    a: Tensor::new(vec![config.rank, k], a)?,
                    b: Tensor::zeros(vec![d, config.rank]),
                });
            }
        }
        Ok(LoraAdapters {
            rank: config.rank,
            alpha: config.alpha,
            adapters,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    /// Tensors in `A, B, A, B, ...` order; the optimizer updates them in place.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.adapters.iter().flat_map(|a| [&a.a, &a.b])
    }

    fn resolve(&self, params: &ModelParams<T>) -> Result<Vec<usize>> {
        self.adapters
            .iter()
            .map(|ad| {
                let idx = params
                    .index_of(&ad.target)
                    .ok_or_else(|| Error::Contract(format!("adapter target {} not in model", ad.target)))?;
                let w = params.tensors()[idx].shape();
                if w.len() != 2 || ad.b.shape() != [w[0], self.rank] || ad.a.shape() != [self.rank, w[1]] {
                    return Err(Error::Contract(format!(
                        "adapter for {} has A {:?}, B {:?} against W {:?}",
                        ad.target,
                        ad.a.shape(),
                        ad.b.shape(),
                        w
                    )));
                }
                Ok(idx)
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> Result<BoundAdapters<T>> {
        let indices = self.resolve(params)?;
        let mut entries = Vec::with_capacity(indices.len());
        for (ad, idx) in self.adapters.iter().zip(indices) {
            let (a, b) = if trainable {
                (
                    g.param(ad.a.shape().to_vec(), ad.a.data().to_vec())?,
                    g.param(ad.b.shape().to_vec(), ad.b.data().to_vec())?,
                )
            } else {
                (
                    g.constant(ad.a.shape().to_vec(), ad.a.data().to_vec())?,
                    g.constant(ad.b.shape().to_vec(), ad.b.data().to_vec())?,
                )
            };
            entries.push((idx, a, b));
        }
        Ok(BoundAdapters {
            entries,
            scale: T::lit(self.scale()),
        })
    }
}

/// Folds adapters into their targets: `W' = W + (alpha/r)·B·A`.
pub fn merge_lora<T: Scalar>(params: &ModelParams<T>, adapters: &LoraAdapters<T>) -> Result<ModelParams<T>> {
    let indices = adapters.resolve(params)?;
    let mut merged = params.clone();
    let scale = T::lit(adapters.scale());
    for (ad, idx) in adapters.adapters.iter().zip(indices) {
        let (d, k) = (ad.b.shape()[0], ad.a.shape()[1]);
        let mut delta = vec![T::zero(); d * k];
        gemm(d, adapters.rank, k, ad.b.data(), false, ad.a.data(), false, &mut delta, false);
        let w = merged.tensors_mut()[idx].data_mut();
        w.iter_mut().zip(&delta).for_each(|(w, &dw)| *w = *w + scale * dw);
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::super::{forward, init, tests::tiny};
    use super::*;

    #[test]
    fn zero_b_is_identity() {
        let params = init::<f32>(&tiny()).unwrap();
        let lora = LoraAdapters::init(&params, &LoraConfig::default()).unwrap();
        assert_eq!(lora.adapters.len(), 4);
        let toks = [5, 6, 7, 8, 9];
        let plain = forward(&params, &toks, None).unwrap();
        let adapted = forward(&params, &toks, Some(&lora)).unwrap();
        let max = plain
            .data()
            .iter()
            .zip(adapted.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max, 0.0);
        assert_eq!(merge_lora(&params, &lora).unwrap(), params);
    }

    #[test]
    fn merge_matches_attached_forward() {
        let params = init::<f32>(&tiny()).unwrap();
        let mut lora = LoraAdapters::init(&params, &LoraConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 0.05).unwrap();
        for t in lora.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng) as f32);
        }
        let merged = merge_lora(&params, &lora).unwrap();
        let toks = [1, 50, 99, 120, 3, 4, 200];
        let attached = forward(&params, &toks, Some(&lora)).unwrap();
        let folded = forward(&merged, &toks, None).unwrap();
        let max = attached
            .data()
            .iter()
            .zip(folded.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= 1e-5, "max |Δlogit| = {max}");
    }

    #[test]
    fn full_rank_merge_adds_delta() {
        // r = d and alpha = r: W' = W + B·A exactly.
        let params = init::<f64>(&tiny()).unwrap();
        let d = params.config.d_model;
        let cfg = LoraConfig {
            rank: d,
            alpha: d as f64,
            targets: vec!["q".into()],
            seed: 1,
        };
        let mut lora = LoraAdapters::init(&params, &cfg).unwrap();
        // B = I makes B·A = A.
        let ad = &mut lora.adapters[0];
        for i in 0..d {
            ad.b.data_mut()[i * d + i] = 1.0;
        }
        let merged = merge_lora(&params, &lora).unwrap();
        let idx = params.index_of("h0.attn.q").unwrap();
        let expect: Vec<f64> = params.tensors()[idx]
            .data()
            .iter()
            .zip(lora.adapters[0].a.data())
            .map(|(w, a)| w + a)
            .collect();
        assert_eq!(merged.tensors()[idx].data(), expect.as_slice());
    }

    #[test]
    fn unknown_target_is_rejected() {
        let params = init::<f32>(&tiny()).unwrap();
        let mut lora = LoraAdapters::init(&params, &LoraConfig::default()).unwrap();
        lora.adapters[0].target = "h9.attn.q".into();
        assert!(matches!(merge_lora(&params, &lora), Err(Error::Contract(_))));
        let bad = LoraConfig {
            targets: vec!["qq".into()],
            ..LoraConfig::default()
        };
        assert!(LoraAdapters::init(&params, &bad).is_err());
    }
}
