//! WebAssembly bindings behind `www/index.html`.
//!
//! Build with `wasm-pack build crates/demo --target web --out-dir www/pkg`.
//! Every export also works natively, which is how the tests exercise them.

use rcssfl::aggregate::{self, AggregationRule};
use rcssfl::attack::{AttackConfig, AttackKind};
use rcssfl::quant;
use rcssfl::rng;
use rcssfl::selection::SelectionMode;
use rcssfl::sim::{AlphaMode, ClientRecord, DatasetSource, RoundMetrics, SimConfig, Simulation};
use wasm_bindgen::prelude::*;

/// Geometric median and mean of points packed as `[x0, y0, x1, y1, ...]`.
/// Returns `[median_x, median_y, mean_x, mean_y]`.
#[wasm_bindgen]
pub fn geometric_median_2d(xy: &[f64]) -> Result<Vec<f64>, String> {
    if xy.is_empty() || !xy.len().is_multiple_of(2) {
        return Err("expected a non-empty list of x, y pairs".into());
    }
    let points: Vec<&[f64]> = xy.chunks(2).collect();
    let (gm, _) = aggregate::weiszfeld(&points, 1e-9, 1_000).map_err(|e| e.to_string())?;
    let n = points.len() as f64;
    let mean = [0, 1].map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n);
    Ok(vec![gm[0], gm[1], mean[0], mean[1]])
}

/// Sends `values` through quantization and the wire format. A non-positive
/// `alpha` searches for one. Returns the restored values followed by the
/// clip threshold used and the serialized size in bytes.
#[wasm_bindgen]
pub fn quantize_roundtrip(values: &[f64], bits: u8, alpha: f64, seed: u32) -> Result<Vec<f64>, String> {
    let alpha = if alpha > 0.0 {
        alpha
    } else {
        quant::auto_alpha(values, bits, &mut rng::stream(u64::from(seed), &[])).map_err(|e| e.to_string())?
    };
    let wire = quant::quantize(values, bits, alpha).map_err(|e| e.to_string())?.to_bytes();
    let received = quant::QuantizedUpdate::from_bytes(&wire).map_err(|e| e.to_string())?;
    let mut out = quant::dequantize(&received);
    out.push(received.alpha());
    out.push(wire.len() as f64);
    Ok(out)
}

/// A small attacked scenario advanced one round per call.
#[wasm_bindgen]
pub struct Demo {
    sim: Simulation,
    last: Option<RoundMetrics>,
}

fn demo_config(seed: u32, malicious: u32, defended: bool, bits: u8) -> SimConfig {
    let (aggregation, selection) = if defended {
        (AggregationRule::gma(), SelectionMode::Both)
    } else {
        (AggregationRule::FedAvg, SelectionMode::Off)
    };
    SimConfig {
        clients: 20,
        participation: 0.5,
        rounds: 40,
        local_epochs: 2,
        learning_rate: 0.02,
        batch_size: 8,
        server_samples: 200,
        quant_bits: (bits != 0).then_some(bits),
        alpha: AlphaMode::Auto,
        aggregation,
        selection,
        attack: AttackConfig {
            kind: if malicious == 0 {
                AttackKind::None
            } else {
                AttackKind::Gaussian { variance: 10.0 }
            },
            malicious: malicious as usize,
        },
        dataset: DatasetSource::Synthetic {
            classes: 10,
            per_class: 150,
            features: 16,
            separation: 3.0,
        },
        seed: u64::from(seed),
        ..SimConfig::default()
    }
}

#[wasm_bindgen]
impl Demo {
    /// `bits = 0` uploads unquantized floats.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, malicious: u32, defended: bool, bits: u8) -> Result<Demo, String> {
        let sim = Simulation::new(demo_config(seed, malicious, defended, bits)).map_err(|e| e.to_string())?;
        Ok(Demo { sim, last: None })
    }

    pub fn total_rounds(&self) -> usize {
        self.sim.config().rounds
    }

    pub fn finished(&self) -> bool {
        self.sim.is_finished()
    }

    /// Runs one round; returns `[round, accuracy, admitted, malicious admitted, bytes up]`.
    pub fn step(&mut self) -> Result<Vec<f64>, String> {
        if self.sim.is_finished() {
            return Err("all rounds are done".into());
        }
        let m = self.sim.step().map_err(|e| e.to_string())?;
        let row = vec![
            m.round as f64,
            m.accuracy,
            m.selected.len() as f64,
            m.n_malicious_selected as f64,
            m.bytes_up as f64,
        ];
        self.last = Some(m);
        Ok(row)
    }

    /// Participants of the last round.
    pub fn clients(&self) -> Vec<u32> {
        self.records(|c| c.client as u32)
    }

    pub fn cosines(&self) -> Vec<f64> {
        self.records(|c| c.cosine)
    }

    /// Per participant: bit 0 set if admitted, bit 1 if malicious.
    pub fn flags(&self) -> Vec<u8> {
        self.records(|c| u8::from(c.admitted) | (u8::from(c.malicious) << 1))
    }

    /// First six parameters of the global model, for a quick look at drift.
    pub fn model_head(&self) -> Vec<f64> {
        self.sim.model().as_slice().iter().take(6).copied().collect()
    }
}

impl Demo {
    fn records<T>(&self, f: impl Fn(&ClientRecord) -> T) -> Vec<T> {
        self.last.as_ref().map_or_else(Vec::new, |m| m.clients.iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_resists_an_outlier_the_mean_follows() {
        let out = geometric_median_2d(&[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 100.0, 100.0]).unwrap();
        assert!(out[0] < 1.5 && out[1] < 1.5, "{out:?}");
        assert!(out[2] > 20.0 && out[3] > 20.0);
    }

    #[test]
    fn odd_input_is_rejected() {
        assert!(geometric_median_2d(&[1.0, 2.0, 3.0]).is_err());
        assert!(geometric_median_2d(&[]).is_err());
    }

    #[test]
    fn round_trip_reports_alpha_and_size() {
        let values: Vec<f64> = (0..100).map(|i| (i as f64 - 50.0) / 100.0).collect();
        let out = quantize_roundtrip(&values, 8, 0.5, 0).unwrap();
        assert_eq!(out.len(), 102);
        assert_eq!(out[100], 0.5);
        assert_eq!(out[101], quant::bytes_for(100, 8) as f64);
        for (a, b) in out.iter().zip(&values) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let searched = quantize_roundtrip(&values, 4, 0.0, 1).unwrap();
        assert!(searched[100] > 0.0);
        assert!(quantize_roundtrip(&values, 3, 0.5, 0).is_err());
    }

    #[test]
    fn demo_steps_until_done() {
        let mut demo = Demo::new(1, 6, true, 8).unwrap();
        let row = demo.step().unwrap();
        assert_eq!(row[0], 1.0);
        assert_eq!(demo.clients().len(), 10);
        assert_eq!(demo.cosines().len(), 10);
        assert!(demo.flags().iter().any(|f| f & 1 == 1));
        assert_eq!(demo.model_head().len(), 6);
        while !demo.finished() {
            demo.step().unwrap();
        }
        assert!(demo.step().is_err());
    }
}
