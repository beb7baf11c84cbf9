//! Closed-form per-round communication costs.
//!
//! * Semantic consensus: every client uploads one response per public prompt
//!   and downloads one pseudo-label per prompt, `K * M * avg_tokens * bytes_per_token`
//!   bytes each way. No model parameter appears in the formula.
//! * Parameter subsampling: `K * fraction * P * bytes_per_param`.
//! * LoRA aggregation: `bytes_per_param * sum_l rank * (d_in + d_out)` per client.
//!
//! Byte counts are exact integers. MB (10^6) and MiB (2^20) views are both
//! reported because published figures mix the two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MB: f64 = 1e6;
pub const MIB: f64 = 1_048_576.0;

fn check_count(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite and non-negative, got {v}")))
    }
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite and positive, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScCostSpec {
    pub clients: u64,
    pub prompts: u64,
    pub avg_tokens: f64,
    pub bytes_per_token: f64,
    pub include_download: bool,
}

pub fn sc_total_bytes(spec: &ScCostSpec) -> Result<u64> {
    check_count("avg_tokens", spec.avg_tokens)?;
    check_positive("bytes_per_token", spec.bytes_per_token)?;
    let one_way =
        (spec.clients as f64 * spec.prompts as f64 * spec.avg_tokens * spec.bytes_per_token).round() as u64;
    Ok(if spec.include_download { 2 * one_way } else { one_way })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraCostSpec {
    /// `(d_in, d_out)` of every adapted matrix.
    pub layers: Vec<(u64, u64)>,
    pub rank: u64,
    pub bytes_per_param: f64,
    pub clients: u64,
}

impl LoraCostSpec {
    pub fn param_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|(din, dout)| self.rank * (din + dout))
            .sum()
    }
}

pub fn lora_upload_bytes(spec: &LoraCostSpec, per_client: bool) -> Result<u64> {
    if spec.rank == 0 {
        return Err(Error::invalid("rank", "must be at least 1"));
    }
    if spec.layers.iter().any(|(a, b)| *a == 0 || *b == 0) {
        return Err(Error::invalid("layers", "dimensions must be positive"));
    }
    check_positive("bytes_per_param", spec.bytes_per_param)?;
    let per = (spec.bytes_per_param * spec.param_count() as f64).round() as u64;
    Ok(if per_client { per } else { per * spec.clients })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleCostSpec {
    pub clients: u64,
    pub fraction: f64,
    pub param_count: u64,
    pub bytes_per_param: f64,
}

pub fn subsample_bytes(spec: &SubsampleCostSpec) -> Result<u64> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::invalid(
            "fraction",
            format!("must lie in (0, 1], got {}", spec.fraction),
        ));
    }
    check_positive("bytes_per_param", spec.bytes_per_param)?;
    Ok(
        (spec.clients as f64 * spec.fraction * spec.param_count as f64 * spec.bytes_per_param).round()
            as u64,
    )
}

/// Which weight matrices carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    /// `W_q` and `W_v`: two `(d_model, d_model)` matrices per layer.
    Qv,
    /// All four attention projections plus the three MLP matrices `(d_model, d_ff)`.
    AttnMlp,
}

impl LoraTargets {
    pub const ALL: [LoraTargets; 2] = [LoraTargets::Qv, LoraTargets::AttnMlp];

    pub fn name(self) -> &'static str {
        match self {
            LoraTargets::Qv => "qv",
            LoraTargets::AttnMlp => "attn_mlp",
        }
    }
}

impl std::str::FromStr for LoraTargets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qv" | "q+v" => Ok(LoraTargets::Qv),
            "attn_mlp" | "attn+mlp" => Ok(LoraTargets::AttnMlp),
            other => Err(Error::invalid("targets", format!("unknown target set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelPreset {
    pub name: &'static str,
    pub layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
}

pub const LLAMA2_13B: ModelPreset = ModelPreset {
    name: "llama2-13b",
    layers: 40,
    d_model: 5120,
    d_ff: 13824,
};

pub const LLAMA31_405B: ModelPreset = ModelPreset {
    name: "llama3.1-405b",
    layers: 126,
    d_model: 16384,
    d_ff: 53248,
};

pub const PRESETS: [ModelPreset; 2] = [LLAMA2_13B, LLAMA31_405B];

impl ModelPreset {
    pub fn by_name(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|p| p.name == name)
            .copied()
            .ok_or_else(|| Error::invalid("preset", format!("unknown preset `{name}`")))
    }

    pub fn adapted_matrices(&self, targets: LoraTargets) -> Vec<(u64, u64)> {
        let (d, ff) = (self.d_model, self.d_ff);
        let per_layer: Vec<(u64, u64)> = match targets {
            LoraTargets::Qv => vec![(d, d); 2],
            LoraTargets::AttnMlp => {
                let mut m = vec![(d, d); 4];
                m.extend([(d, ff); 3]);
                m
            }
        };
        (0..self.layers).flat_map(|_| per_layer.iter().copied()).collect()
    }

    pub fn lora_spec(&self, targets: LoraTargets, rank: u64, bytes_per_param: f64, clients: u64) -> LoraCostSpec {
        LoraCostSpec {
            layers: self.adapted_matrices(targets),
            rank,
            bytes_per_param,
            clients,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ByteSize {
    pub bytes: u64,
    pub mb: f64,
    pub mib: f64,
}

impl From<u64> for ByteSize {
    fn from(bytes: u64) -> Self {
        Self {
            bytes,
            mb: bytes as f64 / MB,
            mib: bytes as f64 / MIB,
        }
    }
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoraComparison {
    pub targets: LoraTargets,
    pub upload_per_client: ByteSize,
    /// Upload plus an equally sized download, per client.
    pub total_per_client: ByteSize,
    /// `total_per_client.bytes / sc_total.bytes`.
    pub raw_ratio: f64,
    /// Ratio of one-decimal MiB for LoRA over one-decimal MB for SC, the
    /// convention behind the commonly quoted 194x / 1006x figures.
    pub rounded_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub preset: ModelPreset,
    pub rank: u64,
    pub bytes_per_param: f64,
    pub sc: ScCostSpec,
    pub sc_total: ByteSize,
    pub lora: Vec<LoraComparison>,
}

pub fn comparison_report(
    preset: &ModelPreset,
    sc: &ScCostSpec,
    rank: u64,
    bytes_per_param: f64,
) -> Result<ComparisonReport> {
    let sc_bytes = sc_total_bytes(sc)?;
    let sc_total = ByteSize::from(sc_bytes);
    let lora = LoraTargets::ALL
        .iter()
        .map(|&targets| {
            let spec = preset.lora_spec(targets, rank, bytes_per_param, sc.clients);
            let upload = lora_upload_bytes(&spec, true)?;
            let total = ByteSize::from(2 * upload);
            Ok(LoraComparison {
                targets,
                upload_per_client: ByteSize::from(upload),
                total_per_client: total,
                raw_ratio: total.bytes as f64 / sc_bytes as f64,
                rounded_ratio: round1(total.mib) / round1(sc_total.mb),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport {
        preset: *preset,
        rank,
        bytes_per_param,
        sc: *sc,
        sc_total,
        lora,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sc(k: u64, m: u64, l: f64, c: f64, both: bool) -> ScCostSpec {
        ScCostSpec {
            clients: k,
            prompts: m,
            avg_tokens: l,
            bytes_per_token: c,
            include_download: both,
        }
    }

    #[test]
    fn sc_examples() {
        assert_eq!(sc_total_bytes(&sc(10, 1024, 128.0, 2.0, true)).unwrap(), 5_242_880);
        assert_eq!(sc_total_bytes(&sc(10, 0, 128.0, 2.0, true)).unwrap(), 0);
        assert_eq!(sc_total_bytes(&sc(1, 1, 1.0, 1.0, false)).unwrap(), 1);
        assert!(sc_total_bytes(&sc(1, 1, -1.0, 1.0, false)).is_err());
        assert!(sc_total_bytes(&sc(1, 1, 1.0, 0.0, false)).is_err());
    }

    #[test]
    fn lora_presets() {
        let up = |p: &ModelPreset, t| lora_upload_bytes(&p.lora_spec(t, 32, 2.0, 10), true).unwrap();
        assert_eq!(up(&LLAMA31_405B, LoraTargets::Qv), 528_482_304);
        assert_eq!(up(&LLAMA31_405B, LoraTargets::AttnMlp), 2_741_501_952);
        assert_eq!(up(&LLAMA2_13B, LoraTargets::Qv), 52_428_800);
        assert_eq!(up(&LLAMA2_13B, LoraTargets::AttnMlp), 250_347_520);
        let all = lora_upload_bytes(&LLAMA2_13B.lora_spec(LoraTargets::Qv, 32, 2.0, 10), false).unwrap();
        assert_eq!(all, 524_288_000);
    }

    #[test]
    fn lora_validation() {
        let mut s = LLAMA2_13B.lora_spec(LoraTargets::Qv, 0, 2.0, 1);
        assert!(lora_upload_bytes(&s, true).is_err());
        s.rank = 1;
        s.layers.push((0, 4));
        assert!(lora_upload_bytes(&s, true).is_err());
    }

    #[test]
    fn subsample_examples() {
        let s = SubsampleCostSpec {
            clients: 1,
            fraction: 1.0,
            param_count: 100,
            bytes_per_param: 2.0,
        };
        assert_eq!(subsample_bytes(&s).unwrap(), 200);
        assert_eq!(subsample_bytes(&SubsampleCostSpec { fraction: 0.5, ..s }).unwrap(), 100);
        assert!(subsample_bytes(&SubsampleCostSpec { fraction: 0.0, ..s }).is_err());
        assert!(subsample_bytes(&SubsampleCostSpec { fraction: 1.5, ..s }).is_err());
    }

    #[test]
    fn comparison_405b() {
        let r = comparison_report(&LLAMA31_405B, &sc(10, 1024, 128.0, 2.0, true), 32, 2.0).unwrap();
        assert_eq!(r.sc_total.bytes, 5_242_880);
        let qv = &r.lora[0];
        assert_eq!(qv.total_per_client.bytes, 1_056_964_608);
        assert_eq!(qv.total_per_client.mib, 1008.0);
        assert!((qv.raw_ratio - 201.6).abs() < 0.01);
        assert_eq!(qv.rounded_ratio.round(), 194.0);
        let am = &r.lora[1];
        assert_eq!(am.total_per_client.bytes, 5_483_003_904);
        assert_eq!(am.upload_per_client.mib, 2614.5);
        assert!((am.raw_ratio - 1045.8).abs() < 0.01);
        assert_eq!(am.rounded_ratio.round(), 1006.0);
    }

    #[test]
    fn comparison_13b() {
        let r = comparison_report(&LLAMA2_13B, &sc(10, 1024, 128.0, 2.0, true), 32, 2.0).unwrap();
        assert_eq!(r.lora[0].upload_per_client.mib, 50.0);
        assert_eq!(r.lora[1].upload_per_client.mib, 238.75);
        assert_eq!(r.lora[0].rounded_ratio.round(), 19.0);
    }

    #[test]
    fn presets_by_name() {
        assert_eq!(ModelPreset::by_name("llama2-13b").unwrap(), LLAMA2_13B);
        assert!(ModelPreset::by_name("gpt").is_err());
        assert_eq!("q+v".parse::<LoraTargets>().unwrap(), LoraTargets::Qv);
        assert!("mlp".parse::<LoraTargets>().is_err());
    }

    #[test]
    fn ratio_does_not_survive_scaling_both_byte_constants() {
        // Doubling c_param doubles LoRA bytes; doubling c_t doubles SC bytes,
        // so the raw ratio is unchanged here, but the rounded ratio is not,
        // because the two sides round on different unit scales.
        let base = comparison_report(&LLAMA31_405B, &sc(10, 1024, 128.0, 2.0, true), 32, 2.0).unwrap();
        let scaled = comparison_report(&LLAMA31_405B, &sc(10, 1024, 128.0, 4.0, true), 32, 4.0).unwrap();
        assert!((base.lora[0].raw_ratio - scaled.lora[0].raw_ratio).abs() < 1e-12);
        assert_ne!(base.lora[0].rounded_ratio, scaled.lora[0].rounded_ratio);
        // Scaling only one side changes the raw ratio.
        let one_side = comparison_report(&LLAMA31_405B, &sc(10, 1024, 128.0, 2.0, true), 32, 4.0).unwrap();
        assert!((one_side.lora[0].raw_ratio - 2.0 * base.lora[0].raw_ratio).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn sc_is_linear_in_each_argument(k in 1u64..50, m in 1u64..2000, l in 1u64..512, c in 1u64..8, f in 2u64..5) {
            let base = sc_total_bytes(&sc(k, m, l as f64, c as f64, true)).unwrap();
            prop_assert_eq!(sc_total_bytes(&sc(f * k, m, l as f64, c as f64, true)).unwrap(), f * base);
            prop_assert_eq!(sc_total_bytes(&sc(k, f * m, l as f64, c as f64, true)).unwrap(), f * base);
            prop_assert_eq!(sc_total_bytes(&sc(k, m, (f * l) as f64, c as f64, true)).unwrap(), f * base);
            prop_assert_eq!(sc_total_bytes(&sc(k, m, l as f64, (f * c) as f64, true)).unwrap(), f * base);
            prop_assert_eq!(sc_total_bytes(&sc(k, m, l as f64, c as f64, false)).unwrap() * 2, base);
        }

        #[test]
        fn lora_ignores_clients_when_per_client(k in 1u64..100, r in 1u64..64) {
            let a = lora_upload_bytes(&LLAMA2_13B.lora_spec(LoraTargets::Qv, r, 2.0, k), true).unwrap();
            let b = lora_upload_bytes(&LLAMA2_13B.lora_spec(LoraTargets::Qv, r, 2.0, 1), true).unwrap();
            prop_assert_eq!(a, b);
            let total = lora_upload_bytes(&LLAMA2_13B.lora_spec(LoraTargets::Qv, r, 2.0, k), false).unwrap();
            prop_assert_eq!(total, k * a);
        }
    }
}
