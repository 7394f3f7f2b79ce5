use super::ladder::StepLadder;
use super::quantize::{latent_dims, QuantizedLatent, ALPHABET_LIMIT};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Probability mass spread uniformly over the whole alphabet.
pub const ESCAPE_MASS: f64 = 1.0 / 65536.0;
/// Integer frequencies used by the range coder sum to `2^FREQ_BITS`.
pub const FREQ_BITS: u32 = 24;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
pub const SIGMA_FLOOR: f64 = 0.05;
/// Minimum samples per channel for fitting.
pub const MIN_FIT_SAMPLES: usize = 100;
const SIGMA_SCALE: f64 = 256.0;

/// A pmf over the contiguous integer range `min_symbol..min_symbol + len`, plus the
/// integer frequency table the range coder uses for it.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolModel {
    min_symbol: i32,
    pmf: Vec<f64>,
    freq: Vec<u32>,
    cum: Vec<u32>,
    coded_bits: Vec<f64>,
}

impl SymbolModel {
    pub fn from_pmf(min_symbol: i32, pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() || pmf.len() > FREQ_TOTAL as usize {
            return Err(Error::InvalidArgument(format!("alphabet of {} symbols", pmf.len())));
        }
        if pmf.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument(
                "pmf entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("pmf sums to {total}")));
        }
        let t = FREQ_TOTAL as f64;
        let mut freq: Vec<u32> = pmf
            .iter()
            .map(|&p| if p == 0.0 { 0 } else { ((p * t).round() as u32).max(1) })
            .collect();
        let sum: i64 = freq.iter().map(|&f| f as i64).sum();
        let (imax, _) = freq.iter().enumerate().max_by_key(|(_, f)| **f).unwrap();
        let fixed = freq[imax] as i64 + (FREQ_TOTAL as i64 - sum);
        if fixed < 1 {
            return Err(Error::InvalidArgument("pmf too flat for the frequency table".into()));
        }
        freq[imax] = fixed as u32;
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freq {
            acc += f;
            cum.push(acc);
        }
        let coded_bits = freq
            .iter()
            .map(|&f| {
                if f == 0 {
                    f64::INFINITY
                } else {
                    FREQ_BITS as f64 - (f as f64).log2()
                }
            })
            .collect();
        Ok(Self {
            min_symbol,
            pmf,
            freq,
            cum,
            coded_bits,
        })
    }

    pub fn uniform(min_symbol: i32, count: usize) -> Result<Self> {
        Self::from_pmf(min_symbol, vec![1.0 / count as f64; count])
    }

    pub fn min_symbol(&self) -> i32 {
        self.min_symbol
    }

    pub fn max_symbol(&self) -> i32 {
        self.min_symbol + self.pmf.len() as i32 - 1
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    fn index(&self, symbol: i32) -> Result<usize> {
        if symbol < self.min_symbol || symbol > self.max_symbol() {
            return Err(Error::SymbolOutOfRange {
                symbol,
                min: self.min_symbol,
                max: self.max_symbol(),
            });
        }
        Ok((symbol - self.min_symbol) as usize)
    }

    pub fn prob(&self, symbol: i32) -> Result<f64> {
        Ok(self.pmf[self.index(symbol)?])
    }

    /// `-log2 p(symbol)` under the real-valued pmf.
    pub fn bits(&self, symbol: i32) -> Result<f64> {
        let p = self.prob(symbol)?;
        if p == 0.0 {
            return Err(Error::SymbolOutOfRange {
                symbol,
                min: self.min_symbol,
                max: self.max_symbol(),
            });
        }
        Ok(-p.log2())
    }

    /// Cost under the integer frequency table; what the range coder actually spends.
    pub fn coded_bits(&self, symbol: i32) -> Result<f64> {
        Ok(self.coded_bits[self.index(symbol)?])
    }

    /// `(cum_freq, freq)` of a symbol.
    pub(crate) fn interval(&self, symbol: i32) -> Result<(u32, u32)> {
        let i = self.index(symbol)?;
        if self.freq[i] == 0 {
            return Err(Error::SymbolOutOfRange {
                symbol,
                min: self.min_symbol,
                max: self.max_symbol(),
            });
        }
        Ok((self.cum[i], self.freq[i]))
    }

    /// Symbol whose interval contains `target < FREQ_TOTAL`.
    pub(crate) fn lookup(&self, target: u32) -> (i32, u32, u32) {
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        (self.min_symbol + i as i32, self.cum[i], self.freq[i])
    }
}

/// Mass of `N(0, scale²)` on `[k - 1/2, k + 1/2]`, computed from the upper tail for accuracy.
fn gaussian_cell_mass(k: i32, scale: f64) -> f64 {
    let s = scale * std::f64::consts::SQRT_2;
    let k = k.unsigned_abs() as f64;
    if k == 0.0 {
        1.0 - libm::erfc(0.5 / s)
    } else {
        0.5 * (libm::erfc((k - 0.5) / s) - libm::erfc((k + 0.5) / s))
    }
}

/// Discretized zero-mean Gaussian over `[-L, L]` with the escape mass folded in uniformly.
pub fn discretized_gaussian_pmf(scale: f64) -> Result<Vec<f64>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian scale {scale}")));
    }
    let mass: Vec<f64> = (-ALPHABET_LIMIT..=ALPHABET_LIMIT)
        .map(|k| gaussian_cell_mass(k, scale))
        .collect();
    let total: f64 = mass.iter().sum();
    let n = mass.len() as f64;
    Ok(mass
        .iter()
        .map(|m| (1.0 - ESCAPE_MASS) * m / total + ESCAPE_MASS / n)
        .collect())
}

pub fn gaussian_model(scale: f64) -> Result<SymbolModel> {
    SymbolModel::from_pmf(-ALPHABET_LIMIT, discretized_gaussian_pmf(scale)?)
}

/// Factorized per-channel Gaussian prior on the real latent. A block quantized with step
/// `Δ` sees symbols with scale `σ_c / Δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyModel {
    sigmas: Vec<f64>,
}

impl EntropyModel {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("sigmas must be positive: {sigmas:?}")));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn channels(&self) -> usize {
        self.sigmas.len()
    }

    /// The `u16` fixed-point form (`σ·256`) carried in the bitstream.
    pub fn to_fixed_point(&self) -> Vec<u16> {
        self.sigmas
            .iter()
            .map(|s| (s * SIGMA_SCALE).round().clamp(1.0, u16::MAX as f64) as u16)
            .collect()
    }

    pub fn from_fixed_point(fixed: &[u16]) -> Result<Self> {
        if fixed.contains(&0) {
            return Err(Error::Bitstream("zero sigma in model table".into()));
        }
        Self::new(fixed.iter().map(|&q| q as f64 / SIGMA_SCALE).collect())
    }

    /// The model the coder uses: sigmas snapped to the fixed-point grid.
    pub fn quantized(&self) -> Self {
        Self::from_fixed_point(&self.to_fixed_point()).expect("fixed point sigmas are positive")
    }

    /// Per-(action, channel) symbol models for coding.
    pub fn bank(&self, ladder: &StepLadder) -> Result<ModelBank> {
        let q = self.quantized();
        let models = ladder
            .steps()
            .iter()
            .map(|step| {
                q.sigmas
                    .iter()
                    .map(|s| gaussian_model(s / step))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelBank { models })
    }
}

/// Symbol models indexed by `[action][channel]`.
#[derive(Clone, Debug)]
pub struct ModelBank {
    models: Vec<Vec<SymbolModel>>,
}

impl ModelBank {
    pub fn get(&self, action: usize, channel: usize) -> &SymbolModel {
        &self.models[action][channel]
    }

    pub fn num_actions(&self) -> usize {
        self.models.len()
    }

    pub fn channels(&self) -> usize {
        self.models.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateEstimate {
    pub total_bits: f64,
    pub per_block: Vec<f64>,
}

/// `Σ -log2 p(ẑ)` with per-block partial sums.
pub fn rate_estimate(q: &QuantizedLatent, bank: &ModelBank) -> Result<RateEstimate> {
    if bank.channels() != q.channels {
        return Err(Error::InvalidArgument(format!(
            "model has {} channels, latent {}",
            bank.channels(),
            q.channels
        )));
    }
    let mut per_block = vec![0.0; q.num_blocks()];
    for (b, c, s) in q.coding_order() {
        per_block[b] += bank.get(q.actions[b], c).bits(s)?;
    }
    Ok(RateEstimate {
        total_bits: per_block.iter().sum(),
        per_block,
    })
}

/// `Σ -log2 p(s)` for a flat symbol list under one model.
pub fn symbol_bits(symbols: &[i32], model: &SymbolModel) -> Result<f64> {
    symbols.iter().map(|&s| model.bits(s)).sum()
}

/// `σ_c = max(sample std, 0.05)` over all samples of each channel.
pub fn fit_entropy_model(samples: &[Tensor]) -> Result<EntropyModel> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no latent samples".into()));
    }
    let channels = latent_dims(&samples[0])?.0;
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); channels];
    for z in samples {
        let (c, h, w) = latent_dims(z)?;
        if c != channels {
            return Err(Error::InvalidArgument(format!(
                "latent with {c} channels, expected {channels}"
            )));
        }
        for (ch, acc) in sums.iter_mut().enumerate() {
            for &v in &z.data()[ch * h * w..(ch + 1) * h * w] {
                acc.0 += 1;
                acc.1 += v;
                acc.2 += v * v;
            }
        }
    }
    let sigmas = sums
        .iter()
        .enumerate()
        .map(|(ch, &(n, s, ss))| {
            if n < MIN_FIT_SAMPLES {
                return Err(Error::InsufficientData(format!(
                    "channel {ch} has {n} samples, need {MIN_FIT_SAMPLES}"
                )));
            }
            let mean = s / n as f64;
            let var = ((ss - n as f64 * mean * mean) / (n - 1) as f64).max(0.0);
            Ok(var.sqrt().max(SIGMA_FLOOR))
        })
        .collect::<Result<Vec<_>>>()?;
    EntropyModel::new(sigmas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn uniform_256_costs_8_bits_per_symbol() {
        let m = SymbolModel::uniform(0, 256).unwrap();
        let s: Vec<i32> = (0..10).map(|i| i * 25).collect();
        assert!((symbol_bits(&s, &m).unwrap() - 80.0).abs() < 1e-9);
        assert_eq!(m.coded_bits(3).unwrap(), 8.0);
    }

    #[test]
    fn certain_symbol_costs_nothing() {
        let m = SymbolModel::from_pmf(5, vec![1.0]).unwrap();
        assert_eq!(symbol_bits(&[5, 5, 5], &m).unwrap(), 0.0);
        assert!(matches!(m.bits(6), Err(Error::SymbolOutOfRange { .. })));
    }

    /// Simpson integral of the normal density on each cell, independent of erfc.
    fn simpson_pmf(scale: f64) -> Vec<f64> {
        let pdf = |x: f64| (-0.5 * (x / scale).powi(2)).exp() / (scale * (2.0 * std::f64::consts::PI).sqrt());
        let cell = |k: f64| {
            let n = 400;
            let h = 1.0 / n as f64;
            let a = k - 0.5;
            let mut s = pdf(a) + pdf(a + 1.0);
            for i in 1..n {
                s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let mass: Vec<f64> = (-127..=127).map(|k| cell(k as f64)).collect();
        let total: f64 = mass.iter().sum();
        mass.iter()
            .map(|m| (1.0 - 2f64.powi(-16)) * m / total + 2f64.powi(-16) / 255.0)
            .collect()
    }

    #[test]
    fn gaussian_sigma_two_matches_quadrature() {
        let m = gaussian_model(2.0).unwrap();
        let oracle = simpson_pmf(2.0);
        let symbols = [0, 1, -1, 2, -3, 5, 0, 7, -9, 12];
        let want: f64 = symbols.iter().map(|&s| -oracle[(s + 127) as usize].log2()).sum();
        let got = symbol_bits(&symbols, &m).unwrap();
        assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
        // arbitrary-precision mpmath value
        assert!((want - 74.993_981_435_201_92).abs() < 1e-6, "{want}");
    }

    #[test]
    fn pmf_invariants_across_scales() {
        for scale in [0.0125, 0.05, 0.3, 1.0, 7.5, 60.0, 400.0] {
            let pmf = discretized_gaussian_pmf(scale).unwrap();
            assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(pmf.iter().all(|&p| p >= 2f64.powi(-24)));
            let m = SymbolModel::from_pmf(-127, pmf).unwrap();
            assert_eq!(m.cum.last(), Some(&FREQ_TOTAL));
            assert!(m.freq.iter().all(|&f| f >= 1));
        }
    }

    #[test]
    fn fixed_point_sigmas() {
        let m = EntropyModel::new(vec![1.0, 0.05, 3.3]).unwrap();
        assert_eq!(m.to_fixed_point(), vec![256, 13, 845]);
        let q = m.quantized();
        assert_eq!(q.quantized(), q);
        assert!(EntropyModel::from_fixed_point(&[0]).is_err());
    }

    #[test]
    fn fit_floor_and_errors() {
        let zeros = vec![Tensor::zeros(&[2, 8, 8]); 2];
        let m = fit_entropy_model(&zeros).unwrap();
        assert_eq!(m.sigmas(), &[0.05, 0.05]);
        assert!(matches!(fit_entropy_model(&[]), Err(Error::InsufficientData(_))));
        assert!(fit_entropy_model(&[Tensor::zeros(&[2, 4, 4])]).is_err());
    }

    #[test]
    fn fit_recovers_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut data = Vec::with_capacity(2 * n);
        for ch in 0..2 {
            let s = if ch == 0 { 1.0 } else { 3.0 };
            data.extend((0..n).map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)));
        }
        let z = Tensor::new(&[2, 1, n], data).unwrap();
        let m = fit_entropy_model(&[z]).unwrap();
        assert!((0.98..=1.02).contains(&m.sigmas()[0]), "{:?}", m.sigmas());
        let ratio = m.sigmas()[1] / m.sigmas()[0];
        assert!((ratio - 3.0).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn lookup_inverts_interval() {
        let m = gaussian_model(1.7).unwrap();
        for s in -127..=127 {
            let (c, f) = m.interval(s).unwrap();
            assert_eq!(m.lookup(c), (s, c, f));
            assert_eq!(m.lookup(c + f - 1).0, s);
        }
    }
}
