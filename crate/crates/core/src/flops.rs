//! FLOPs accounting: total cost and sequential time of each training method.
//!
//! Time is total FLOPs divided by the largest parallelism available, with
//! every example (and, for local methods, every block) assumed to run
//! concurrently.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Scheme;
use crate::optim::OPTIMIZER_FLOPS_PER_PARAM;

/// Per-model inputs to the cost formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModelConstants {
    pub layers: usize,
    /// Average forward FLOPs per example per layer.
    pub forward_cost: f64,
    /// FLOPs per example of one auxiliary head including its loss.
    pub aux_cost: f64,
    /// Backward FLOPs as a multiple of forward FLOPs.
    pub backward_multiplier: f64,
    /// `None` where no count is published; the optimizer term is then zero.
    pub parameters: Option<u64>,
}

impl CostModelConstants {
    pub fn optimizer_cost(&self) -> f64 {
        self.parameters
            .map_or(0.0, |p| OPTIMIZER_FLOPS_PER_PARAM * p as f64)
    }

    fn parameters_f64(&self) -> f64 {
        self.parameters.map_or(0.0, |p| p as f64)
    }
}

/// Forward FLOPs of the first and of each subsequent dense layer: a
/// matrix-vector product, a bias add and a ReLU at one FLOP per entry.
pub fn mlp_layer_costs(hidden: usize, input: usize) -> (f64, f64) {
    let (n, i) = (hidden as f64, input as f64);
    let first = (2.0 * i * n - i) + n + 2.0 * n;
    let rest = (2.0 * n * n - n) + n + 2.0 * n;
    (first, rest)
}

/// Linear head to `classes` logits plus softmax cross-entropy at five FLOPs
/// per logit.
pub fn mlp_aux_cost(hidden: usize, classes: usize) -> f64 {
    let (n, c) = (hidden as f64, classes as f64);
    (2.0 * n * c - n) + c + 5.0 * c
}

pub fn mlp_parameters(hidden: usize, layers: usize, input: usize, classes: usize) -> u64 {
    let (n, l, i, c) = (hidden as u64, layers as u64, input as u64, classes as u64);
    (i * n + n) + l.saturating_sub(1) * (n * n + n) + (n * c + c)
}

pub fn mlp_constants(hidden: usize, layers: usize, input: usize, classes: usize) -> CostModelConstants {
    let (first, rest) = mlp_layer_costs(hidden, input);
    let l = layers.max(1) as f64;
    CostModelConstants {
        layers,
        forward_cost: (first + (l - 1.0) * rest) / l,
        aux_cost: mlp_aux_cost(hidden, classes),
        backward_multiplier: 1.5,
        parameters: Some(mlp_parameters(hidden, layers, input, classes)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Mlp4096,
    Resnet18,
    Resnet50,
    TransformerSmall,
    TransformerLarge,
}

impl ModelId {
    pub const ALL: [ModelId; 5] = [
        ModelId::Mlp4096,
        ModelId::Resnet18,
        ModelId::Resnet50,
        ModelId::TransformerSmall,
        ModelId::TransformerLarge,
    ];
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::Mlp4096 => "mlp4096",
            ModelId::Resnet18 => "resnet18",
            ModelId::Resnet50 => "resnet50",
            ModelId::TransformerSmall => "transformer_small",
            ModelId::TransformerLarge => "transformer_large",
        })
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown model `{s}`")))
    }
}

/// Published per-model constants.
pub fn registry(model: ModelId) -> CostModelConstants {
    match model {
        ModelId::Mlp4096 => mlp_constants(4096, 8, 3072, 10),
        ModelId::Resnet50 => CostModelConstants {
            layers: 17,
            forward_cost: 5479411.176470588,
            aux_cost: 3382457.3529411764,
            backward_multiplier: 2.0280375672996596,
            parameters: Some(38711720),
        },
        ModelId::Resnet18 => CostModelConstants {
            layers: 9,
            forward_cost: 1640544.352941176,
            aux_cost: 565900.6470588235,
            backward_multiplier: 2.08565879129763,
            parameters: Some(13170792),
        },
        ModelId::TransformerSmall => CostModelConstants {
            layers: 4,
            forward_cost: 13837446.0,
            aux_cost: 1163904.0,
            backward_multiplier: 1.6581083035860107,
            parameters: None,
        },
        ModelId::TransformerLarge => CostModelConstants {
            layers: 6,
            forward_cost: 51037318.0,
            aux_cost: 4653696.0,
            backward_multiplier: 1.7526391044859857,
            parameters: None,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub method: Scheme,
    pub cost_per_example: f64,
    /// Total FLOPs.
    pub cost: f64,
    /// Sequential FLOPs.
    pub time: f64,
    /// Divisor applied to `cost / batch_size` to obtain `time`.
    pub parallelism: f64,
}

/// Total and sequential FLOPs for `steps` updates at `batch_size`.
pub fn method_cost(
    c: &CostModelConstants,
    method: Scheme,
    batch_size: usize,
    steps: usize,
) -> Result<MethodCost> {
    if batch_size == 0 || steps == 0 {
        return Err(Error::config("batch size and steps must be at least 1"));
    }
    let (l, fwd, aux, bm) = (
        c.layers as f64,
        c.forward_cost,
        c.aux_cost,
        c.backward_multiplier,
    );
    let check_k = |k: usize| {
        if k == 0 || k > c.layers {
            Err(Error::config(format!("K = {k} must be in 1..={}", c.layers)))
        } else {
            Ok(k as f64)
        }
    };
    let mut step_extra = c.optimizer_cost();
    let (cpe, parallelism) = match method {
        Scheme::Backprop => ((1.0 + bm) * (fwd * l + aux), 1.0),
        Scheme::Greedy => ((1.0 + bm) * ((fwd + aux) * l), l),
        Scheme::Overlapping => {
            step_extra += 2.0 * c.parameters_f64();
            (
                (fwd + aux) * l + (l - 1.0) * bm * (2.0 * fwd + aux) + bm * (fwd + aux),
                l,
            )
        }
        Scheme::Chunked(k) => {
            let k = check_k(k)?;
            ((1.0 + bm) * (fwd * l + k * aux), k)
        }
        Scheme::LastK(k) => {
            let k = check_k(k)?;
            (
                l * fwd + aux + bm * (k * fwd + aux),
                // (L + K·bm) / (K·(1 + bm)), rearranged so K = L rounds to exactly 1.
                1.0 + (l - k) / (k * (1.0 + bm)),
            )
        }
    };
    let (b, s) = (batch_size as f64, steps as f64);
    let cost = cpe * s * b + s * step_extra;
    Ok(MethodCost {
        method,
        cost_per_example: cpe,
        cost,
        time: cost / (b * parallelism),
        parallelism,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp4096_published_values() {
        let c = mlp_constants(4096, 8, 3072, 10);
        assert_eq!(c.forward_cost, 32514176.0);
        assert_eq!(c.aux_cost, 77884.0);
        assert_eq!(c.backward_multiplier, 1.5);
    }

    #[test]
    fn unit_scale_formulas() {
        let (first, _) = mlp_layer_costs(1, 1);
        assert_eq!(first, 4.0);
        assert_eq!(mlp_aux_cost(1, 1), 7.0);
        assert_eq!(mlp_constants(1, 1, 1, 1).forward_cost, 4.0);
    }

    #[test]
    fn mlp1024_by_hand() {
        // first: 2*3072*1024 - 3072 + 3*1024 = 6291456
        // rest:  2*1024*1024 - 1024 + 3*1024 = 2099200
        // mean over 8 layers: (6291456 + 7*2099200) / 8 = 2623232
        // aux:   2*1024*10 - 1024 + 10 + 50 = 19516
        let c = mlp_constants(1024, 8, 3072, 10);
        assert_eq!(c.forward_cost, 2623232.0);
        assert_eq!(c.aux_cost, 19516.0);
    }

    #[test]
    fn registry_decimal_strings() {
        let r50 = registry(ModelId::Resnet50);
        assert_eq!(format!("{:?}", r50.forward_cost), "5479411.176470588");
        assert_eq!(format!("{:?}", r50.aux_cost), "3382457.3529411764");
        assert_eq!(format!("{:?}", r50.backward_multiplier), "2.0280375672996596");
        assert_eq!(r50.parameters, Some(38711720));
        assert_eq!(r50.layers, 17);
        let ts = registry(ModelId::TransformerSmall);
        assert_eq!(format!("{:?}", ts.forward_cost), "13837446.0");
        assert_eq!(format!("{:?}", ts.backward_multiplier), "1.6581083035860107");
    }

    #[test]
    fn model_names_parse() {
        for m in ModelId::ALL {
            assert_eq!(m.to_string().parse::<ModelId>().unwrap(), m);
        }
        assert!("vgg".parse::<ModelId>().is_err());
    }

    #[test]
    fn k_bounds() {
        let c = registry(ModelId::Resnet18);
        assert!(method_cost(&c, Scheme::Chunked(10), 1, 1).is_err());
        assert!(method_cost(&c, Scheme::LastK(0), 1, 1).is_err());
        assert!(method_cost(&c, Scheme::Backprop, 0, 1).is_err());
    }

    #[test]
    fn toy_greedy_speedup() {
        let c = CostModelConstants {
            layers: 4,
            forward_cost: 1.0,
            aux_cost: 0.0,
            backward_multiplier: 1.0,
            parameters: None,
        };
        let bp = method_cost(&c, Scheme::Backprop, 8, 3).unwrap();
        let gr = method_cost(&c, Scheme::Greedy, 8, 3).unwrap();
        assert_eq!(gr.time, bp.time / 4.0);
    }

    #[test]
    fn last_k_parallelism_at_least_one() {
        let c = registry(ModelId::Resnet50);
        for k in 1..=c.layers {
            let m = method_cost(&c, Scheme::LastK(k), 4, 2).unwrap();
            assert!(m.parallelism >= 1.0, "k={k}");
            assert!(m.time <= m.cost);
        }
    }
}
