//! The gate network: a small classifier over domains operating on the
//! latent representation. Its softmax output weights the adapters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::INIT_STD;
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ConvSpec, Init, LinearLayer};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

pub const NAMESPACE: &str = "gate.";

/// Tolerance on the unit sum of a [`DomainDistribution`].
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub conv_channels: usize,
    pub pool_kernel: usize,
    /// Side of the square adaptive-pooling target.
    pub adaptive_out: usize,
    /// Number of target domains; the gate emits `k + 1` logits.
    pub k: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { conv_channels: 32, pool_kernel: 2, adaptive_out: 4, k: 2 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.adaptive_out < 1 || self.pool_kernel < 1 || self.conv_channels < 1 {
            return Err(Error::Config(format!("invalid gate config {self:?}")));
        }
        Ok(())
    }

    pub fn parameter_count(&self, latent_channels: usize) -> usize {
        let conv = 9 * latent_channels * self.conv_channels + self.conv_channels;
        let s2 = self.adaptive_out * self.adaptive_out;
        let linear = self.conv_channels * s2 * (self.k + 1) + (self.k + 1);
        conv + linear
    }
}

/// A probability vector over the `K + 1` domains (index 0 is the source).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDistribution(Vec<f64>);

impl DomainDistribution {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Codec("empty domain distribution".into()));
        }
        if v.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::Codec(format!("domain weights outside [0, 1]: {v:?}")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Codec(format!("domain weights sum to {s}, not 1")));
        }
        Ok(DomainDistribution(v))
    }

    pub fn uniform(n: usize) -> Self {
        DomainDistribution(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Result<Self> {
        if k >= n {
            return Err(Error::Codec(format!("one-hot index {k} outside 0..{n}")));
        }
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Ok(DomainDistribution(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_one_hot(&self) -> bool {
        self.0.iter().filter(|&&p| p == 1.0).count() == 1 && self.0.iter().all(|&p| p == 0.0 || p == 1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateOutput {
    /// `[N, K+1]` raw scores.
    pub logits: Var,
    /// `[N, K+1]` softmax of the logits.
    pub v: Var,
}

#[derive(Debug, Clone)]
pub struct Gate {
    pub config: GateConfig,
    pub conv: ConvLayer,
    pub linear: LinearLayer,
}

impl Gate {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        latent_channels: usize,
        config: GateConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let init = Init::Gaussian { std: INIT_STD };
        let spec = ConvSpec::conv(latent_channels, config.conv_channels, 3, 1);
        let conv = ConvLayer::new(store, &format!("{NAMESPACE}conv"), spec, init, true, rng)?;
        let features = config.conv_channels * config.adaptive_out * config.adaptive_out;
        let linear = LinearLayer::new(store, &format!("{NAMESPACE}linear"), features, config.k + 1, init, rng)?;
        Ok(Gate { config, conv, linear })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, latent_channels: usize, config: GateConfig) -> Result<Self> {
        config.validate()?;
        let spec = ConvSpec::conv(latent_channels, config.conv_channels, 3, 1);
        let conv = ConvLayer::bind(store, &format!("{NAMESPACE}conv"), spec)
            .ok_or_else(|| Error::Checkpoint("missing or mis-shaped gate conv".into()))?;
        let features = config.conv_channels * config.adaptive_out * config.adaptive_out;
        let linear = LinearLayer::bind(store, &format!("{NAMESPACE}linear"), features, config.k + 1)
            .ok_or_else(|| Error::Checkpoint("missing or mis-shaped gate linear layer".into()))?;
        Ok(Gate { config, conv, linear })
    }

    pub fn parameter_count(&self) -> usize {
        self.conv.spec.parameter_count() + self.linear.parameter_count()
    }

    /// conv3x3 -> ReLU -> maxpool -> adaptive avg pool -> flatten -> linear -> softmax.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, y: Var) -> Result<GateOutput> {
        let s = self.config.adaptive_out;
        let shape = g.value(y).shape().to_vec();
        if shape.len() != 4 || shape[2] < s || shape[3] < s {
            return Err(Error::Tensor(crate::tensor::TensorError::Dimension {
                op: "gate",
                detail: format!("latent {shape:?} smaller than the {s}x{s} pooling target"),
            }));
        }
        let h = self.conv.forward(g, store, y)?;
        let h = g.relu(h);
        let h = g.maxpool2d(h, self.config.pool_kernel)?;
        let h = g.adaptive_avg_pool2d(h, s, s)?;
        let h = g.reshape(h, &[shape[0], self.config.conv_channels * s * s])?;
        let logits = self.linear.forward(g, store, h)?;
        let v = g.softmax(logits)?;
        Ok(GateOutput { logits, v })
    }
}

/// Per-row [`DomainDistribution`]s of a `[N, K+1]` tensor.
pub fn distributions<T: Scalar>(t: &crate::tensor::Tensor<T>) -> Result<Vec<DomainDistribution>> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Codec(format!("expected [N, K+1] distribution tensor, got {s:?}")));
    }
    t.data()
        .chunks(s[1])
        .map(|row| {
            let v: Vec<f64> = row.iter().map(|p| p.as_f64().clamp(0.0, 1.0)).collect();
            let sum: f64 = v.iter().sum();
            DomainDistribution::new(v.iter().map(|p| p / sum).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gate(k: usize) -> (ParamStore<f64>, Gate) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = GateConfig { conv_channels: 8, pool_kernel: 2, adaptive_out: 2, k };
        let gate = Gate::new(&mut store, 16, cfg, &mut rng).unwrap();
        (store, gate)
    }

    #[test]
    fn output_has_k_plus_one_entries_for_any_size() {
        let (store, gate) = gate(2);
        for (h, w) in [(4, 4), (6, 10), (16, 16)] {
            let mut g = Graph::new();
            let y = g.input(Tensor::full(&[2, 16, h, w], 0.7));
            let out = gate.forward(&mut g, &store, y).unwrap();
            assert_eq!(g.value(out.v).shape(), [2, 3]);
            for d in distributions(g.value(out.v)).unwrap() {
                assert_eq!(d.len(), 3);
            }
        }
    }

    #[test]
    fn zero_linear_layer_gives_uniform() {
        let (mut store, gate) = gate(2);
        store.tensor_mut(gate.linear.weight).data_mut().fill(0.0);
        let mut g = Graph::new();
        let y = g.input(Tensor::full(&[1, 16, 4, 4], 1.3));
        let out = gate.forward(&mut g, &store, y).unwrap();
        for &p in g.value(out.v).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_small_latent_is_a_dimension_error() {
        let (store, gate) = gate(2);
        let mut g = Graph::new();
        let y = g.input(Tensor::zeros(&[1, 16, 1, 3]));
        assert!(gate.forward(&mut g, &store, y).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        let (store, gate) = gate(2);
        let cfg = gate.config;
        assert_eq!(gate.parameter_count(), cfg.parameter_count(16));
        assert_eq!(gate.conv.spec.parameter_count(), 9 * 16 * 8 + 8);
        assert_eq!(gate.linear.parameter_count(), 8 * 4 * 3 + 3);
        assert_eq!(store.count_prefix(NAMESPACE), gate.parameter_count());
    }

    #[test]
    fn distribution_validation() {
        assert!(DomainDistribution::new(vec![0.2, 0.5, 0.3]).is_ok());
        assert!(DomainDistribution::new(vec![0.2, 0.5, 0.4]).is_err());
        assert!(DomainDistribution::new(vec![-0.1, 0.6, 0.5]).is_err());
        assert_eq!(DomainDistribution::new(vec![0.4, 0.2, 0.4]).unwrap().argmax(), 0);
        assert!(DomainDistribution::one_hot(3, 1).unwrap().is_one_hot());
    }
}
