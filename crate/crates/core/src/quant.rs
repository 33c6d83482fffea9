//! Symmetric `r`-bit quantization over a clipped range `[-alpha, alpha]`,
//! its wire format, and the MMD-driven choice of `alpha`.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

pub const SUPPORTED_BITS: [u8; 4] = [2, 4, 8, 16];
pub const MAGIC: [u8; 4] = *b"SQNT";
pub const HEADER_BYTES: usize = 16;
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Entries used for the MMD search.
pub const MMD_SUBSAMPLE: usize = 512;
/// Candidate clip thresholds as fractions of the largest absolute entry.
pub const ALPHA_GRID_FRACTIONS: [f64; 7] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedUpdate {
    bits: u8,
    alpha: f32,
    codes: Vec<u16>,
}

fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
        )))
    }
}

impl QuantizedUpdate {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn alpha(&self) -> f64 {
        f64::from(self.alpha)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    /// Builds an update from raw codes, rejecting codes outside `[0, 2^r - 1]`.
    pub fn from_codes(bits: u8, alpha: f32, codes: Vec<u16>) -> Result<Self> {
        check_bits(bits)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Domain(format!("clip threshold {alpha} must be positive")));
        }
        let max = levels(bits);
        if let Some(pos) = codes.iter().position(|&c| u32::from(c) > max) {
            return Err(Error::CorruptPayload(format!(
                "code {} at index {pos} exceeds {max}",
                codes[pos]
            )));
        }
        Ok(QuantizedUpdate { bits, alpha, codes })
    }

    /// `magic | u8 r | f32 alpha | u32 d | 3 reserved zero bytes | codes`,
    /// little-endian, codes packed low bits first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(payload_bytes(self));
        out.extend_from_slice(&MAGIC);
        out.push(self.bits);
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&(self.codes.len() as u32).to_le_bytes());
        out.extend_from_slice(&[0; 3]);
        let r = u32::from(self.bits);
        let mut acc: u64 = 0;
        let mut filled = 0;
        for &c in &self.codes {
            acc |= u64::from(c) << filled;
            filled += r;
            while filled >= 8 {
                out.push(acc as u8);
                acc >>= 8;
                filled -= 8;
            }
        }
        if filled > 0 {
            out.push(acc as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::CorruptPayload(format!(
                "payload of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::CorruptPayload("bad magic".into()));
        }
        let bits = bytes[4];
        check_bits(bits).map_err(|e| Error::CorruptPayload(e.to_string()))?;
        let alpha = f32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]);
        let d = u32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]) as usize;
        if bytes[13..16] != [0, 0, 0] {
            return Err(Error::CorruptPayload("reserved header bytes are not zero".into()));
        }
        let r = usize::from(bits);
        let body = &bytes[HEADER_BYTES..];
        if body.len() != (d * r).div_ceil(8) {
            return Err(Error::CorruptPayload(format!(
                "body holds {} bytes, {d} codes of {r} bits need {}",
                body.len(),
                (d * r).div_ceil(8)
            )));
        }
        let mask = (1u64 << r) - 1;
        let mut codes = Vec::with_capacity(d);
        let mut acc: u64 = 0;
        let mut filled = 0;
        let mut it = body.iter();
        for _ in 0..d {
            while filled < r {
                acc |= u64::from(*it.next().expect("length checked")) << filled;
                filled += 8;
            }
            codes.push((acc & mask) as u16);
            acc >>= r;
            filled -= r;
        }
        QuantizedUpdate::from_codes(bits, alpha, codes)
    }
}

/// Serialized size: packed codes plus the fixed header.
pub fn payload_bytes(q: &QuantizedUpdate) -> usize {
    bytes_for(q.len(), u32::from(q.bits))
}

/// Size of `d` values at `bits` each plus the header; `bits = 32` accounts
/// for an unquantized `f32` upload.
pub fn bytes_for(d: usize, bits: u32) -> usize {
    (d * bits as usize).div_ceil(8) + HEADER_BYTES
}

/// Clips to `[-alpha, alpha]` and maps affinely onto `0..=2^r - 1`, rounding
/// half away from zero.
pub fn quantize(w: &[f64], bits: u8, alpha: f64) -> Result<QuantizedUpdate> {
    check_bits(bits)?;
    let alpha = alpha as f32;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Domain(format!("clip threshold {alpha} must be positive")));
    }
    if let Some(pos) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite entry at index {pos}")));
    }
    let a = f64::from(alpha);
    let top = f64::from(levels(bits));
    let codes = w
        .iter()
        .map(|&v| {
            let clipped = v.clamp(-a, a);
            // non-negative, so round() is round-half-away-from-zero
            (top * (clipped + a) / (2.0 * a)).round().min(top) as u16
        })
        .collect();
    Ok(QuantizedUpdate { bits, alpha, codes })
}

/// `code * 2 alpha / (2^r - 1) - alpha`.
pub fn dequantize(q: &QuantizedUpdate) -> Vec<f64> {
    let a = q.alpha();
    let top = f64::from(levels(q.bits));
    q.codes
        .iter()
        .map(|&c| (f64::from(c) * 2.0 * a / top - a).clamp(-a, a))
        .collect()
}

pub fn gaussian_kernel(x: f64, y: f64, sigma: f64) -> f64 {
    (-(x - y) * (x - y) / (2.0 * sigma * sigma)).exp()
}

/// Squared MMD with unbiased within-sample terms and the full cross term.
pub fn mmd2(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Domain("mmd2 needs at least two samples on each side".into()));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Domain(format!("kernel bandwidth {sigma} must be positive")));
    }
    let within = |s: &[f64]| {
        let n = s.len() as f64;
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += gaussian_kernel(s[i], s[j], sigma);
            }
        }
        2.0 * total / (n * (n - 1.0))
    };
    let cross: f64 = x
        .iter()
        .map(|&a| y.iter().map(|&b| gaussian_kernel(a, b, sigma)).sum::<f64>())
        .sum();
    Ok(within(x) + within(y) - 2.0 * cross / (x.len() as f64 * y.len() as f64))
}

/// Median of pairwise absolute differences; falls back to 1 when the sample
/// is constant.
pub fn median_bandwidth(samples: &[f64]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(samples.len() * samples.len() / 2);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            d.push((samples[i] - samples[j]).abs());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// The grid entry minimizing the MMD between `entries` and their
/// quantize-dequantize image; ties go to the smaller threshold.
pub fn optimize_alpha(entries: &[f64], bits: u8, sigma: f64, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Domain("alpha grid is empty".into()));
    }
    let mut candidates = grid.to_vec();
    candidates.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for alpha in candidates {
        let restored = dequantize(&quantize(entries, bits, alpha)?);
        let score = mmd2(entries, &restored, sigma)?;
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((alpha, score));
        }
    }
    Ok(best.expect("grid is nonempty").0)
}

/// Searches a grid scaled to the largest entry on a random subsample of at
/// most [`MMD_SUBSAMPLE`] entries, with a median-heuristic bandwidth. Falls
/// back to [`DEFAULT_ALPHA`] for all-zero or tiny inputs.
pub fn auto_alpha(w: &[f64], bits: u8, rng: &mut impl Rng) -> Result<f64> {
    let max_abs = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if w.len() < 2 || max_abs <= 0.0 || !max_abs.is_finite() {
        return Ok(DEFAULT_ALPHA);
    }
    let sample: Vec<f64> = if w.len() > MMD_SUBSAMPLE {
        let mut idx = index::sample(rng, w.len(), MMD_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| w[i]).collect()
    } else {
        w.to_vec()
    };
    let sigma = median_bandwidth(&sample);
    let grid: Vec<f64> = ALPHA_GRID_FRACTIONS.iter().map(|f| f * max_abs).collect();
    optimize_alpha(&sample, bits, sigma, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn endpoints_and_midpoint_r8() {
        let q = quantize(&[0.5, -0.5, 0.0], 8, 0.5).unwrap();
        assert_eq!(q.codes(), &[255, 0, 128]);
    }

    #[test]
    fn four_levels_r2() {
        let q = quantize(&[-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0], 2, 1.0).unwrap();
        assert_eq!(q.codes(), &[0, 1, 2, 3]);
    }

    #[test]
    fn dequantize_endpoints_and_code_128() {
        let q = QuantizedUpdate::from_codes(8, 0.5, vec![0, 255, 128]).unwrap();
        let w = dequantize(&q);
        assert_eq!(w[0], -0.5);
        assert_eq!(w[1], 0.5);
        assert_relative_eq!(w[2], 0.5 * 256.0 / 255.0 - 0.5, epsilon = 1e-15);
        assert_relative_eq!(w[2], 0.0019608, epsilon = 1e-7);
    }

    #[test]
    fn out_of_range_entries_clip_to_the_ends() {
        let q = quantize(&[3.0, -7.5], 4, 0.25).unwrap();
        assert_eq!(dequantize(&q), vec![0.25, -0.25]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(quantize(&[f64::NAN], 8, 0.5), Err(Error::Domain(_))));
        assert!(matches!(quantize(&[0.0], 3, 0.5), Err(Error::Domain(_))));
        assert!(matches!(quantize(&[0.0], 8, 0.0), Err(Error::Domain(_))));
        assert!(matches!(
            QuantizedUpdate::from_codes(2, 1.0, vec![4]),
            Err(Error::CorruptPayload(_))
        ));
    }

    #[test]
    fn payload_sizes() {
        let q8 = quantize(&vec![0.0; 1000], 8, 0.5).unwrap();
        let q2 = quantize(&vec![0.0; 1000], 2, 0.5).unwrap();
        assert_eq!(payload_bytes(&q8), 1016);
        assert_eq!(payload_bytes(&q2), 266);
        assert_eq!(q8.to_bytes().len(), payload_bytes(&q8));
        assert_eq!(bytes_for(1000, 32), 4016);
    }

    #[test]
    fn wire_layout_is_exact() {
        let q = QuantizedUpdate::from_codes(4, 1.0, vec![0x1, 0x2, 0xf]).unwrap();
        let b = q.to_bytes();
        assert_eq!(&b[..4], b"SQNT");
        assert_eq!(b[4], 4);
        assert_eq!(&b[5..9], &1.0f32.to_le_bytes());
        assert_eq!(&b[9..13], &3u32.to_le_bytes());
        assert_eq!(&b[13..16], &[0, 0, 0]);
        // low nibble first: 0x21, then 0x0f
        assert_eq!(&b[16..], &[0x21, 0x0f]);
        assert_eq!(QuantizedUpdate::from_bytes(&b).unwrap(), q);
    }

    #[test]
    fn corrupt_wire_payloads() {
        let q = quantize(&[0.1, -0.2, 0.3], 16, 0.5).unwrap();
        let b = q.to_bytes();
        assert!(QuantizedUpdate::from_bytes(&b[..10]).is_err());
        assert!(QuantizedUpdate::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(QuantizedUpdate::from_bytes(&bad).is_err());
        let mut bad = b.clone();
        bad[4] = 5;
        assert!(QuantizedUpdate::from_bytes(&bad).is_err());
    }

    #[test]
    fn mmd_hand_values() {
        let v = mmd2(&[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert_relative_eq!(v, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(v, 0.786939, epsilon = 1e-6);
        assert_eq!(mmd2(&[0.3; 5], &[0.3; 5], 0.7).unwrap(), 0.0);
        assert!(mmd2(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn narrow_entries_prefer_the_tight_threshold() {
        let entries: Vec<f64> = (0..200).map(|i| -0.1 + 0.2 * i as f64 / 199.0).collect();
        // a bandwidth on the scale of the 8-bit step resolves rounding error
        let sigma = 0.001;
        let scores: Vec<f64> = [0.1, 0.5, 1.0]
            .iter()
            .map(|&a| mmd2(&entries, &dequantize(&quantize(&entries, 8, a).unwrap()), sigma).unwrap())
            .collect();
        assert!(scores[0] < scores[1] && scores[1] < scores[2], "{scores:?}");
        assert_eq!(optimize_alpha(&entries, 8, sigma, &[1.0, 0.5, 0.1]).unwrap(), 0.1);
    }

    #[test]
    fn constant_zero_vector_picks_the_smallest_threshold() {
        let w = vec![0.0; 64];
        assert_eq!(optimize_alpha(&w, 8, 1.0, &[0.5, 0.2, 1.0]).unwrap(), 0.2);
        let mut rng = crate::rng::stream(1, &[]);
        assert_eq!(auto_alpha(&w, 8, &mut rng).unwrap(), DEFAULT_ALPHA);
    }
}
