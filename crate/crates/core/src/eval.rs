//! Rate-distortion evaluation of adapted models against their adapter-free
//! backbones: per-dataset curves, BD deltas, mean gate distributions and a
//! comparison of blending policies.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bitstream::DecodeLimits;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{bd_metrics, bpp, psnr_capped, BdResult, BdVariant, RDCurve, RDPoint};
use crate::model::LicModel;
use crate::policy::PolicyKind;

pub const ANCHOR: &str = "anchor";

/// Mean operating point of one dataset at one quality under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub quality: u8,
    /// A policy name, or [`ANCHOR`] for the adapter-free backbone.
    pub method: String,
    pub bpp: f64,
    pub psnr_db: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdRow {
    pub dataset: String,
    pub policy: PolicyKind,
    #[serde(flatten)]
    pub result: Option<BdResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub dataset: String,
    pub label: usize,
    /// Gate output averaged over images and qualities.
    pub mean_v: Vec<f64>,
    /// Fraction of images whose argmax is the dataset's label.
    pub top1_accuracy: f64,
}

/// Parameter counts of the evaluated model (taken from the lowest quality).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub adapters: usize,
    pub gate: usize,
}

impl ParameterCounts {
    pub fn of(model: &LicModel<f32>) -> Self {
        ParameterCounts {
            encoder: model.backbone.encoder_parameter_count(),
            decoder: model.backbone.decoder_parameter_count(),
            adapters: model.adapter_parameter_count(),
            gate: model.gate_parameter_count(),
        }
    }

    /// Adapter bank size relative to the decoder.
    pub fn bank_ratio(&self) -> f64 {
        self.adapters as f64 / self.decoder.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub domains: Vec<String>,
    pub qualities: Vec<u8>,
    pub policies: Vec<PolicyKind>,
    pub variant: BdVariant,
    pub records: Vec<EvalRecord>,
    pub bd: Vec<BdRow>,
    pub gate: Vec<GateRow>,
    #[serde(default)]
    pub parameters: ParameterCounts,
}

/// Test images of one dataset, all carrying the dataset's label.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub label: usize,
    pub images: Vec<Image>,
}

/// Encodes and decodes every image of every set at every quality with the
/// adapter-free backbone and with each policy. `models` holds one model per
/// quality, adapted or not; a model without adapters is compared with itself.
pub fn evaluate_model(
    models: &[LicModel<f32>],
    sets: &[EvalSet],
    policies: &[PolicyKind],
    variant: BdVariant,
) -> Result<Report> {
    if models.len() < 4 {
        return Err(Error::Config(format!("evaluation needs at least 4 quality checkpoints, got {}", models.len())));
    }
    if sets.is_empty() || sets.iter().any(|s| s.images.is_empty()) {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    if policies.is_empty() {
        return Err(Error::Config("no blending policies to evaluate".into()));
    }
    let mut models: Vec<&LicModel<f32>> = models.iter().collect();
    models.sort_by_key(|m| m.backbone.config.quality_index);
    let qualities: Vec<u8> = models.iter().map(|m| m.backbone.config.quality_index).collect();
    if qualities.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate quality checkpoints {qualities:?}")));
    }
    let domains = match models[0].adaptation.as_ref() {
        Some(a) => a.meta.domains.clone(),
        None => sets.iter().map(|s| s.name.clone()).collect(),
    };
    for m in &models[1..] {
        if m.k() != models[0].k() {
            return Err(Error::Compat("quality checkpoints disagree on K".into()));
        }
    }

    let limits = DecodeLimits::default();
    let mut records = Vec::new();
    let mut gate = Vec::new();
    for set in sets {
        let width = models[0].k().map_or(0, |k| k + 1);
        let mut v_sum = vec![0.0; width];
        let (mut hits, mut seen) = (0usize, 0usize);
        for model in &models {
            let q = model.backbone.config.quality_index;
            let anchor = model.backbone_only();
            let mut methods: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            let mut anchor_pts = Vec::with_capacity(set.images.len());
            let mut policy_pts = vec![Vec::with_capacity(set.images.len()); policies.len()];
            for img in &set.images {
                let (h, w) = (img.height(), img.width());
                let c = anchor.compress(img, PolicyKind::Proposed, None)?;
                let d = anchor.decompress(&c.bytes, limits, false)?;
                anchor_pts.push((bpp(c.bytes.len(), h, w), psnr_capped(img, &d.image)?));
                for (p, &policy) in policies.iter().enumerate() {
                    let c = model.compress(img, policy, Some(set.label))?;
                    if p == 0 {
                        if let Some(v) = &c.analysis.v {
                            for (s, x) in v_sum.iter_mut().zip(v.as_slice()) {
                                *s += x;
                            }
                            hits += usize::from(v.argmax() == set.label);
                            seen += 1;
                        }
                    }
                    let d = model.decompress(&c.bytes, limits, false)?;
                    policy_pts[p].push((bpp(c.bytes.len(), h, w), psnr_capped(img, &d.image)?));
                }
            }
            methods.push((ANCHOR.to_string(), anchor_pts));
            for (p, pts) in policies.iter().zip(policy_pts) {
                methods.push((p.name().to_string(), pts));
            }
            for (method, pts) in methods {
                let n = pts.len() as f64;
                records.push(EvalRecord {
                    dataset: set.name.clone(),
                    quality: q,
                    method,
                    bpp: pts.iter().map(|p| p.0).sum::<f64>() / n,
                    psnr_db: pts.iter().map(|p| p.1).sum::<f64>() / n,
                    images: pts.len(),
                });
            }
        }
        if seen > 0 {
            gate.push(GateRow {
                dataset: set.name.clone(),
                label: set.label,
                mean_v: v_sum.iter().map(|s| s / seen as f64).collect(),
                top1_accuracy: hits as f64 / seen as f64,
            });
        }
    }

    let mut bd = Vec::new();
    for set in sets {
        let curve = |method: &str| {
            let pts = records
                .iter()
                .filter(|r| r.dataset == set.name && r.method == method)
                .map(|r| RDPoint { bpp: r.bpp, psnr_db: r.psnr_db })
                .collect();
            RDCurve::new(format!("{}/{method}", set.name), pts)
        };
        for &policy in policies {
            let res = curve(ANCHOR).and_then(|a| curve(policy.name()).and_then(|t| bd_metrics(&a, &t, variant)));
            let (result, error) = match res {
                Ok(r) => (Some(r), None),
                Err(e) => {
                    log::warn!("BD metrics for {} / {}: {e}", set.name, policy.name());
                    (None, Some(e.to_string()))
                }
            };
            bd.push(BdRow { dataset: set.name.clone(), policy, result, error });
        }
    }
    let parameters = ParameterCounts::of(models[0]);
    Ok(Report { domains, qualities, policies: policies.to_vec(), variant, records, bd, gate, parameters })
}

impl Report {
    pub fn bd_row(&self, dataset: &str, policy: PolicyKind) -> Option<&BdRow> {
        self.bd.iter().find(|r| r.dataset == dataset && r.policy == policy)
    }

    pub fn gate_row(&self, dataset: &str) -> Option<&GateRow> {
        self.gate.iter().find(|r| r.dataset == dataset)
    }

    /// PSNR of `method` on `dataset`, averaged over qualities.
    pub fn mean_psnr(&self, dataset: &str, method: &str) -> Option<f64> {
        let v: Vec<f64> =
            self.records.iter().filter(|r| r.dataset == dataset && r.method == method).map(|r| r.psnr_db).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn datasets(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.dataset.as_str()) {
                seen.push(r.dataset.as_str());
            }
        }
        seen
    }

    /// Plain-text tables: RD points, BD deltas, mean gate output and the
    /// policy comparison.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let variant = match self.variant {
            BdVariant::Cubic => "cubic",
            BdVariant::Pchip => "pchip",
        };
        let p = &self.parameters;
        let _ = writeln!(
            s,
            "Parameters: encoder {}, decoder {}, adapters {} ({:.2}x decoder), gate {} ({:.2}% of encoder)\n",
            p.encoder,
            p.decoder,
            p.adapters,
            p.bank_ratio(),
            p.gate,
            100.0 * p.gate as f64 / p.encoder.max(1) as f64
        );
        let _ = writeln!(s, "RD points ({variant} BD fit)");
        let _ = writeln!(s, "{:<12} {:>3} {:<9} {:>8} {:>8}", "dataset", "q", "method", "bpp", "psnr");
        for r in &self.records {
            let _ = writeln!(s, "{:<12} {:>3} {:<9} {:>8.4} {:>8.3}", r.dataset, r.quality, r.method, r.bpp, r.psnr_db);
        }
        let _ = writeln!(s, "\nBD vs adapter-free backbone");
        let _ = writeln!(s, "{:<12} {:<9} {:>11} {:>10}", "dataset", "policy", "BD-rate %", "BD-PSNR");
        for r in &self.bd {
            match (&r.result, &r.error) {
                (Some(b), _) => {
                    let _ = writeln!(
                        s,
                        "{:<12} {:<9} {:>11.3} {:>10.4}",
                        r.dataset,
                        r.policy.name(),
                        b.bd_rate_percent,
                        b.bd_psnr_db
                    );
                }
                (None, e) => {
                    let _ = writeln!(s, "{:<12} {:<9} error: {}", r.dataset, r.policy.name(), e.as_deref().unwrap_or("?"));
                }
            }
        }
        if !self.gate.is_empty() {
            let _ = writeln!(s, "\nMean gate distribution");
            let _ = write!(s, "{:<12}", "dataset");
            for d in &self.domains {
                let _ = write!(s, " {d:>9}");
            }
            let _ = writeln!(s, " {:>9}", "top1 acc");
            for g in &self.gate {
                let _ = write!(s, "{:<12}", g.dataset);
                for p in &g.mean_v {
                    let _ = write!(s, " {p:>9.4}");
                }
                let _ = writeln!(s, " {:>9.3}", g.top1_accuracy);
            }
        }
        let _ = writeln!(s, "\nMean PSNR by blending policy");
        let _ = write!(s, "{:<12} {:>9}", "dataset", ANCHOR);
        for p in &self.policies {
            let _ = write!(s, " {:>9}", p.name());
        }
        let _ = writeln!(s);
        for d in self.datasets() {
            let _ = write!(s, "{d:<12} {:>9.3}", self.mean_psnr(d, ANCHOR).unwrap_or(f64::NAN));
            for p in &self.policies {
                let _ = write!(s, " {:>9.3}", self.mean_psnr(d, p.name()).unwrap_or(f64::NAN));
            }
            let _ = writeln!(s);
        }
        s
    }

    /// One JSON object per dataset x quality x method.
    pub fn records_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// RD curves of every dataset and method as a standalone SVG.
    pub fn to_svg(&self) -> String {
        let datasets = self.datasets();
        let (pw, ph, pad) = (320.0, 240.0, 40.0);
        let total_w = datasets.len() as f64 * (pw + pad) + pad;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"10\">\n",
            ph + 2.0 * pad
        );
        let colors = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
        for (i, d) in datasets.iter().enumerate() {
            let ox = pad + i as f64 * (pw + pad);
            let rs: Vec<&EvalRecord> = self.records.iter().filter(|r| r.dataset == *d).collect();
            let (bmin, bmax) = rs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, r| (a.0.min(r.bpp), a.1.max(r.bpp)));
            let (pmin, pmax) =
                rs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, r| (a.0.min(r.psnr_db), a.1.max(r.psnr_db)));
            let sx = |b: f64| ox + (b - bmin) / (bmax - bmin).max(1e-9) * pw;
            let sy = |p: f64| pad + ph - (p - pmin) / (pmax - pmin).max(1e-9) * ph;
            let _ = writeln!(s, "<rect x=\"{ox}\" y=\"{pad}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>");
            let _ = writeln!(s, "<text x=\"{ox}\" y=\"{}\">{d}</text>", pad - 8.0);
            let _ = writeln!(
                s,
                "<text x=\"{ox}\" y=\"{}\">bpp {bmin:.3} .. {bmax:.3}, PSNR {pmin:.2} .. {pmax:.2} dB</text>",
                pad + ph + 16.0
            );
            let methods = std::iter::once(ANCHOR.to_string()).chain(self.policies.iter().map(|p| p.name().to_string()));
            for (m, method) in methods.enumerate() {
                let pts: Vec<String> = rs
                    .iter()
                    .filter(|r| r.method == method)
                    .map(|r| format!("{:.2},{:.2}", sx(r.bpp), sy(r.psnr_db)))
                    .collect();
                let c = colors[m % colors.len()];
                let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\"/>", pts.join(" "));
                let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{method}</text>", ox + 6.0, pad + 14.0 + 12.0 * m as f64);
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Groups images by label into named evaluation sets.
pub fn eval_sets(domains: &[String], images: Vec<Image>, max_per_domain: Option<usize>) -> Vec<EvalSet> {
    let mut by: BTreeMap<usize, Vec<Image>> = BTreeMap::new();
    for img in images {
        if let Some(l) = img.domain_label {
            let v = by.entry(l).or_default();
            if max_per_domain.is_none_or(|m| v.len() < m) {
                v.push(img);
            }
        }
    }
    by.into_iter()
        .filter_map(|(label, images)| {
            domains.get(label).map(|name| EvalSet { name: name.clone(), label, images })
        })
        .collect()
}
