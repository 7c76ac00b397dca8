//! Engine-versus-oracle suites behind `semistream verify`.

use std::fmt::Write as _;

use semistream_core::dataflow::run_inference;
use semistream_core::engines::{exp_forward, pro_forward};
use semistream_core::model::{random_image, LayerDesc, LayerKind, PreparedModel, QTensor};
use semistream_core::oracle::cases::{first_mismatch, random_case, EngineCase};
use semistream_core::oracle::run_sequential;
use semistream_core::quant::Rounding;

/// Deliberate defects used to check that the suites catch errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Output zero point off by one in the engine's copy of the layer.
    RequantOffByOne,
}

impl Fault {
    fn apply(self, layer: &mut LayerDesc) {
        match self {
            Fault::RequantOffByOne => {
                for r in &mut layer.requant {
                    r.out_zero += 1;
                }
                if let Some(a) = &mut layer.add {
                    a.out_zero = a.out_zero.wrapping_add(1);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random cases per suite.
    pub trials: usize,
    pub rounding: Rounding,
    pub fault: Option<Fault>,
    /// Whole-model images when a model is given.
    pub model_images: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { seed: 0, trials: 100, rounding: Rounding::Nearest, fault: None, model_images: 2 }
    }
}

/// First disagreement found by a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub case: String,
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub expected: u8,
    pub got: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub mismatch: Option<Mismatch>,
    /// Cases that could not be built or run.
    pub error: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none() && self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn total_cases(&self) -> usize {
        self.suites.iter().map(|s| s.cases).sum()
    }

    /// Suite lines and the verdict; warnings are kept separate.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            let status = if s.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{status} {} cases={}", s.name, s.cases);
            if let Some(m) = &s.mismatch {
                let _ = writeln!(out, "  case: {}", m.case);
                let _ = writeln!(
                    out,
                    "  first mismatch at row={} col={} channel={}: expected {} got {}",
                    m.row, m.col, m.channel, m.expected, m.got
                );
            }
            if let Some(e) = &s.error {
                let _ = writeln!(out, "  error: {e}");
            }
        }
        let verdict = if self.passed() { "ok" } else { "FAILED" };
        let _ = writeln!(out, "verify: {verdict} ({} cases)", self.total_cases());
        out
    }
}

fn compare(case: String, expected: &QTensor, got: &QTensor) -> Option<Mismatch> {
    first_mismatch(expected, got).map(|(row, col, channel, expected, got)| Mismatch {
        case,
        row,
        col,
        channel,
        expected,
        got,
    })
}

/// Runs `trials` cases; stops at the first failure.
fn suite(
    name: &str,
    config: &VerifyConfig,
    mut check: impl FnMut(u64) -> Result<Option<Mismatch>, String>,
) -> SuiteResult {
    let mut result = SuiteResult { name: name.to_string(), cases: 0, mismatch: None, error: None };
    for t in 0..config.trials as u64 {
        result.cases += 1;
        match check(config.seed.wrapping_add(t)) {
            Ok(None) => {}
            Ok(Some(m)) => {
                result.mismatch = Some(m);
                break;
            }
            Err(e) => {
                result.error = Some(e);
                break;
            }
        }
    }
    result
}

fn case_for(kind: LayerKind, stride: usize, seed: u64, config: &VerifyConfig) -> Result<EngineCase, String> {
    random_case(kind, stride, seed, config.rounding).map_err(|e| format!("seed {seed}: {e}"))
}

fn engine_vs_oracle(
    kind: LayerKind,
    stride: usize,
    seed: u64,
    config: &VerifyConfig,
) -> Result<Option<Mismatch>, String> {
    let case = case_for(kind, stride, seed, config)?;
    let expected = case.run_oracle().map_err(|e| format!("{}: {e}", case.describe()))?;
    let mut engine_case = case.clone();
    if let Some(f) = config.fault {
        f.apply(&mut engine_case.layer);
    }
    let (got, _) = engine_case.run_engine().map_err(|e| format!("{}: {e}", case.describe()))?;
    Ok(compare(case.describe(), &expected, &got))
}

fn pro_vs_exp(seed: u64, config: &VerifyConfig) -> Result<Option<Mismatch>, String> {
    let case = case_for(LayerKind::Pro, 1, seed, config)?;
    let err = |e: semistream_core::Error| format!("{}: {e}", case.describe());
    let (pro, _) = pro_forward(&case.input, &case.layer, case.rounding).map_err(err)?;
    let mut layer = case.layer.clone();
    if let Some(f) = config.fault {
        f.apply(&mut layer);
    }
    let (exp, _) = exp_forward(&case.input, &layer, case.rounding).map_err(err)?;
    Ok(compare(case.describe(), &pro, &exp))
}

/// Runs every suite. With a model, also compares streamed inference with
/// layer-by-layer evaluation on `model_images` seeded images.
pub fn run_verify(model: Option<&PreparedModel>, config: &VerifyConfig) -> VerifyReport {
    let mut warnings = Vec::new();
    if config.trials == 0 {
        warnings.push("trials = 0, no cases were run".to_string());
    }
    let mut suites = vec![
        suite("c2d-stride2", config, |s| engine_vs_oracle(LayerKind::C2d, 2, s, config)),
        suite("c2d-stride1", config, |s| engine_vs_oracle(LayerKind::C2d, 1, s, config)),
        suite("dwc-stride1", config, |s| engine_vs_oracle(LayerKind::Dwc, 1, s, config)),
        suite("dwc-stride2", config, |s| engine_vs_oracle(LayerKind::Dwc, 2, s, config)),
        suite("avgpool", config, |s| engine_vs_oracle(LayerKind::AvgPool, 1, s, config)),
        suite("pro", config, |s| engine_vs_oracle(LayerKind::Pro, 1, s, config)),
        suite("exp", config, |s| engine_vs_oracle(LayerKind::Exp, 1, s, config)),
        suite("add", config, |s| engine_vs_oracle(LayerKind::Add, 1, s, config)),
        suite("pro-exp-order", config, |s| pro_vs_exp(s, config)),
    ];
    if let Some(m) = model {
        let images = if config.trials == 0 { 0 } else { config.model_images };
        let cfg = VerifyConfig { trials: images, ..config.clone() };
        suites.push(suite("model-stream-vs-sequential", &cfg, |s| {
            let image = random_image(m.graph.input, s);
            let expected = run_sequential(m, &image).map_err(|e| e.to_string())?;
            let got = run_inference(m, &image).map_err(|e| e.to_string())?;
            Ok(compare(format!("model image seed={s}"), &expected, &got))
        }));
    }
    VerifyReport { suites, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_engines_pass() {
        let report = run_verify(None, &VerifyConfig { trials: 8, ..Default::default() });
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.total_cases(), 8 * 9);
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = VerifyConfig { trials: 4, fault: Some(Fault::RequantOffByOne), ..Default::default() };
        let report = run_verify(None, &cfg);
        assert!(!report.passed());
        let pro = report.suites.iter().find(|s| s.name == "pro").unwrap();
        let m = pro.mismatch.as_ref().unwrap();
        assert_eq!(m.got as i32 - m.expected as i32, 1);
        assert!(report.render().contains("first mismatch at row="));
    }

    #[test]
    fn zero_trials_warns_and_passes() {
        let report = run_verify(None, &VerifyConfig { trials: 0, ..Default::default() });
        assert!(report.passed());
        assert_eq!(report.total_cases(), 0);
        assert_eq!(report.warnings.len(), 1);
    }
}
