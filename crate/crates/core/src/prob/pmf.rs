//! Discretized-Gaussian PMFs and their integer quantization.

use super::density::clamp_sigma;
use super::normal::std_normal_cdf;

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
pub const N_MIN: i32 = -32;
pub const N_MAX: i32 = 32;

/// Integer frequency table over the symbols `n_min..=n_max`, summing to
/// exactly [`TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedPmf {
    n_min: i32,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl QuantizedPmf {
    pub fn n_min(&self) -> i32 {
        self.n_min
    }

    pub fn n_max(&self) -> i32 {
        self.n_min + self.freqs.len() as i32 - 1
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    /// Cumulative table of length `freqs.len() + 1`, starting at 0 and
    /// ending at [`TOTAL`].
    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn contains(&self, symbol: i32) -> bool {
        symbol >= self.n_min && symbol <= self.n_max()
    }

    /// (cumulative start, frequency) of an in-range symbol.
    #[inline]
    pub fn interval(&self, symbol: i32) -> (u32, u32) {
        let i = (symbol - self.n_min) as usize;
        (self.cum[i], self.freqs[i])
    }

    /// Symbol whose interval contains `target` (< TOTAL).
    #[inline]
    pub fn lookup(&self, target: u32) -> i32 {
        // First index with cum > target, minus one.
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        self.n_min + i as i32
    }

    /// Ideal code length of `symbol` in bits under the integer table.
    pub fn bits(&self, symbol: i32) -> f64 {
        let (_, f) = self.interval(symbol);
        -(f as f64 / TOTAL as f64).log2()
    }
}

/// Real-valued PMF of a zero-mean discretized Gaussian over
/// `n_min..=n_max`, with tail mass folded into the edge symbols.
///
/// P(n) = Φ((n+½)/σ) − Φ((n−½)/σ), evaluated on the reflected (lower) tail
/// so P(n) and P(−n) are computed identically.
pub fn real_pmf(sigma: f64, n_min: i32, n_max: i32) -> Vec<f64> {
    assert!(n_min < n_max, "alphabet needs at least two symbols");
    let s = clamp_sigma(sigma);
    (n_min..=n_max)
        .map(|n| {
            if n == n_min {
                std_normal_cdf((n as f64 + 0.5) / s)
            } else if n == n_max {
                std_normal_cdf(-(n as f64 - 0.5) / s)
            } else {
                let a = -(n.abs() as f64);
                std_normal_cdf((a + 0.5) / s) - std_normal_cdf((a - 0.5) / s)
            }
        })
        .collect()
}

/// Deterministic integer quantization of a real PMF.
///
/// Scale to [`TOTAL`] and floor; hand the remainder out one unit at a time
/// to the symbols with the largest real mass (ties to the lowest index);
/// finally raise every zero to 1 by taking from the current largest bin.
pub fn quantize(real: &[f64], n_min: i32) -> QuantizedPmf {
    assert!(
        real.len() <= TOTAL as usize,
        "alphabet larger than the frequency total"
    );
    let mut freqs: Vec<u32> = real
        .iter()
        .map(|&p| (p.max(0.0) * TOTAL as f64).floor() as u32)
        .collect();
    let assigned: u64 = freqs.iter().map(|&f| f as u64).sum();
    assert!(assigned <= TOTAL as u64, "PMF mass exceeds one");
    let mut remainder = TOTAL as u64 - assigned;

    let mut order: Vec<usize> = (0..real.len()).collect();
    order.sort_by(|&a, &b| real[b].total_cmp(&real[a]).then(a.cmp(&b)));
    while remainder > 0 {
        for &i in &order {
            if remainder == 0 {
                break;
            }
            freqs[i] += 1;
            remainder -= 1;
        }
    }

    for i in 0..freqs.len() {
        if freqs[i] == 0 {
            let donor = (0..freqs.len())
                .max_by(|&a, &b| freqs[a].cmp(&freqs[b]).then(b.cmp(&a)))
                .expect("nonempty");
            debug_assert!(freqs[donor] > 1);
            freqs[donor] -= 1;
            freqs[i] = 1;
        }
    }

    let mut cum = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0u32;
    cum.push(0);
    for &f in &freqs {
        acc += f;
        cum.push(acc);
    }
    debug_assert_eq!(acc, TOTAL);
    QuantizedPmf { n_min, freqs, cum }
}

/// Integer PMF used to code a latent element with prior scale `sigma`.
pub fn pmf_for_sigma(sigma: f64) -> QuantizedPmf {
    quantize(&real_pmf(sigma, N_MIN, N_MAX), N_MIN)
}
