//! Per-domain residual adapters and their blending at the decoder
//! plugging points.
//!
//! At site `j` the decoder computes
//! `l_j(y_j) + sum_k v_k * Ad_j^k(y_j)` where `l_j` is the frozen decoder
//! layer and `v` the domain distribution carried in the bitstream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Backbone, P0_LAYER};
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ConvSpec, Init};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

pub const NAMESPACE: &str = "adapters.";

/// Default standard deviation of Gaussian adapter initialization.
pub const INIT_STD: f64 = 0.02;

/// Which decoder layers carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterLayout {
    /// A same-shape conv beside the second decoder block plus transposed-conv
    /// adapters beside the last two upsampling layers.
    #[default]
    BlockAndLastTwo,
    /// Transposed-conv adapters beside the last three upsampling layers.
    LastThree,
}

impl AdapterLayout {
    /// Decoder layer index of sites 0, 1, 2.
    pub fn layers(self) -> [usize; 3] {
        match self {
            AdapterLayout::BlockAndLastTwo => [P0_LAYER, 3, 4],
            AdapterLayout::LastThree => [2, 3, 4],
        }
    }

    pub fn site_of_layer(self, layer: usize) -> Option<usize> {
        self.layers().iter().position(|&l| l == layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BankInit {
    /// Normal weights with this standard deviation, zero biases.
    Gaussian(f64),
    Zero,
}

/// The three adapter modules of one domain.
#[derive(Debug, Clone)]
pub struct AdapterTriple {
    pub domain_id: usize,
    pub modules: [ConvLayer; 3],
}

#[derive(Debug, Clone)]
pub struct AdapterBank {
    /// Number of target domains; the bank holds `k + 1` triples.
    pub k: usize,
    pub layout: AdapterLayout,
    pub triples: Vec<AdapterTriple>,
}

/// Blending inputs handed to the decoder: the bank and a `[N, K+1]`
/// distribution node.
#[derive(Debug, Clone, Copy)]
pub struct AdapterContext<'a> {
    pub bank: &'a AdapterBank,
    pub v: Var,
}

fn module_name(domain: usize, site: usize) -> String {
    format!("{NAMESPACE}d{domain}.ad{site}")
}

/// Each adapter mirrors the channels, kernel and stride of the layer it
/// parallels.
fn site_specs(backbone: &Backbone, layout: AdapterLayout) -> [ConvSpec; 3] {
    layout.layers().map(|l| backbone.decoder[l].conv.spec)
}

impl AdapterBank {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        backbone: &Backbone,
        k: usize,
        layout: AdapterLayout,
        init: BankInit,
        rng: &mut R,
    ) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("an adapter bank needs at least one target domain (K >= 1)".into()));
        }
        let specs = site_specs(backbone, layout);
        let init = match init {
            BankInit::Gaussian(std) => Init::Gaussian { std },
            BankInit::Zero => Init::Zero,
        };
        let mut triples = Vec::with_capacity(k + 1);
        for d in 0..=k {
            let mut mods = Vec::with_capacity(3);
            for (site, spec) in specs.iter().enumerate() {
                mods.push(ConvLayer::new(store, &module_name(d, site), *spec, init, true, rng)?);
            }
            let modules: [ConvLayer; 3] = mods.try_into().expect("three sites");
            triples.push(AdapterTriple { domain_id: d, modules });
        }
        Ok(AdapterBank { k, layout, triples })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, backbone: &Backbone, k: usize, layout: AdapterLayout) -> Result<Self> {
        let specs = site_specs(backbone, layout);
        let mut triples = Vec::with_capacity(k + 1);
        for d in 0..=k {
            let mut mods = Vec::with_capacity(3);
            for (site, spec) in specs.iter().enumerate() {
                let name = module_name(d, site);
                mods.push(
                    ConvLayer::bind(store, &name, *spec)
                        .ok_or_else(|| Error::Checkpoint(format!("missing or mis-shaped adapter {name}")))?,
                );
            }
            triples.push(AdapterTriple { domain_id: d, modules: mods.try_into().expect("three sites") });
        }
        Ok(AdapterBank { k, layout, triples })
    }

    pub fn num_domains(&self) -> usize {
        self.k + 1
    }

    pub fn parameter_count(&self) -> usize {
        self.triples
            .iter()
            .flat_map(|t| t.modules.iter())
            .map(|m| m.spec.parameter_count())
            .sum()
    }

    /// Residual blend at `site`: `layer_output + sum_k v[:, k] * Ad_site^k(y_j)`.
    ///
    /// When `v` carries no gradient, domains whose weight is exactly zero for
    /// every sample are skipped, so they receive no gradient either.
    pub fn blend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y_j: Var,
        layer_output: Var,
        v: Var,
        site: usize,
    ) -> Result<Var> {
        let vs = g.value(v).shape().to_vec();
        let batch = g.value(y_j).shape().first().copied().unwrap_or(0);
        if vs.len() != 2 || vs[1] != self.k + 1 || vs[0] != batch {
            return Err(Error::Tensor(crate::tensor::TensorError::Contract {
                op: "blend",
                detail: format!("distribution shape {vs:?}, expected [{batch}, {}]", self.k + 1),
            }));
        }
        if site > 2 {
            return Err(Error::Config(format!("adapter site {site} outside 0..=2")));
        }
        let constant = !g.requires_grad(v);
        let out_shape = g.value(layer_output).shape().to_vec();
        let mut acc = layer_output;
        for (k, triple) in self.triples.iter().enumerate() {
            if constant {
                let vv = g.value(v);
                if (0..batch).all(|i| vv.data()[i * (self.k + 1) + k] == T::zero()) {
                    continue;
                }
            }
            let a = triple.modules[site].forward(g, store, y_j)?;
            if g.value(a).shape() != out_shape.as_slice() {
                return Err(Error::Tensor(crate::tensor::TensorError::Dimension {
                    op: "blend",
                    detail: format!(
                        "adapter d{k}.ad{site} produced {:?}, layer produced {out_shape:?}",
                        g.value(a).shape()
                    ),
                }));
            }
            let weight = g.column(v, k)?;
            let term = g.mul_rows(a, weight)?;
            acc = g.add(acc, term)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(init: BankInit) -> (ParamStore<f64>, Backbone, AdapterBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = CodecConfig::for_quality(0, 8, 8).unwrap();
        let bb = Backbone::new(&mut store, cfg, &mut rng).unwrap();
        let bank = AdapterBank::init(&mut store, &bb, 2, AdapterLayout::BlockAndLastTwo, init, &mut rng).unwrap();
        (store, bb, bank)
    }

    #[test]
    fn bank_has_k_plus_one_triples() {
        let (_, _, bank) = setup(BankInit::Gaussian(INIT_STD));
        assert_eq!(bank.triples.len(), 3);
        assert_eq!(bank.triples.iter().map(|t| t.domain_id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn zero_bank_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, CodecConfig::for_quality(0, 8, 8).unwrap(), &mut rng).unwrap();
        assert!(AdapterBank::init(&mut store, &bb, 0, AdapterLayout::BlockAndLastTwo, BankInit::Zero, &mut rng).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        let (store, _, bank) = setup(BankInit::Zero);
        // N = 8: ad0 conv 8->8 (9*64+8), ad1 tconv 8->8 (9*64+8), ad2 tconv 8->3 (9*24+3)
        let per_domain = (9 * 64 + 8) * 2 + 9 * 24 + 3;
        assert_eq!(bank.parameter_count(), 3 * per_domain);
        assert_eq!(bank.parameter_count(), store.count_prefix(NAMESPACE));
        let single = ConvSpec::conv(16, 16, 3, 1);
        assert_eq!(single.parameter_count(), 9 * 16 * 16 + 16);
    }

    #[test]
    fn gaussian_init_is_reproducible() {
        let (a, _, _) = setup(BankInit::Gaussian(INIT_STD));
        let (b, _, _) = setup(BankInit::Gaussian(INIT_STD));
        assert_eq!(a.hash_prefix(NAMESPACE), b.hash_prefix(NAMESPACE));
    }

    #[test]
    fn blend_rejects_wrong_distribution_length() {
        let (store, _, bank) = setup(BankInit::Zero);
        let mut g = Graph::<f64>::new();
        let y = g.input(Tensor::zeros(&[1, 8, 4, 4]));
        let l = g.input(Tensor::zeros(&[1, 8, 4, 4]));
        let v = g.input(Tensor::full(&[1, 2], 0.5));
        assert!(bank.blend(&mut g, &store, y, l, v, 0).is_err());
    }

    #[test]
    fn blend_of_constant_adapters_is_weighted_sum() {
        let (mut store, _, bank) = setup(BankInit::Zero);
        // domain 0 outputs constant 2.0, domain 1 constant -4.0 at site 0
        let b0 = bank.triples[0].modules[0].bias;
        let b1 = bank.triples[1].modules[0].bias;
        store.tensor_mut(b0).data_mut().fill(2.0);
        store.tensor_mut(b1).data_mut().fill(-4.0);
        let mut g = Graph::<f64>::new();
        let y = g.input(Tensor::full(&[1, 8, 4, 4], 0.3));
        let l = g.input(Tensor::full(&[1, 8, 4, 4], 1.0));
        let v = g.input(Tensor::new(&[1, 3], vec![0.5, 0.5, 0.0]).unwrap());
        let out = bank.blend(&mut g, &store, y, l, v, 0).unwrap();
        for &o in g.value(out).data() {
            assert!((o - (1.0 + 0.5 * 2.0 - 0.5 * 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn layouts_map_sites_to_layers() {
        assert_eq!(AdapterLayout::BlockAndLastTwo.site_of_layer(1), Some(0));
        assert_eq!(AdapterLayout::BlockAndLastTwo.site_of_layer(2), None);
        assert_eq!(AdapterLayout::LastThree.site_of_layer(2), Some(0));
        assert_eq!(AdapterLayout::LastThree.site_of_layer(4), Some(2));
    }
}
