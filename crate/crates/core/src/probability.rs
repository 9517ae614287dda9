//! Birthday-paradox success probability for hard-NAT traversal.
//!
//! The hard side opens `B` mappings at unknown ports inside a space of `K`
//! ports. The easy side probes `A` *distinct* ports drawn uniformly without
//! replacement. The chance that at least one probe lands on an open mapping is
//!
//! ```text
//! P = 1 - prod_{i=0}^{A-1} (K - B - i) / (K - i)
//! ```
//!
//! Everything here is evaluated in log space with compensated summation so
//! that budgets up to `K` never underflow.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbabilityError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("target probability {target} is unreachable with {open_ports} open ports")]
    UnreachableTarget { target: f64, open_ports: u32 },
}

/// An inclusive range of usable port numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortSpace {
    lo: u16,
    hi: u16,
}

impl PortSpace {
    pub const DEFAULT_LO: u16 = 1025;
    pub const DEFAULT_HI: u16 = 65535;

    pub fn new(lo: u16, hi: u16) -> Result<Self, ProbabilityError> {
        if lo == 0 || lo > hi {
            return Err(ProbabilityError::InvalidParameters(format!(
                "port space requires 1 <= lo <= hi, got lo={lo} hi={hi}"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// A space of `k` ports starting at 1. Handy for small exhaustive checks.
    pub fn with_size(k: u32) -> Result<Self, ProbabilityError> {
        if k == 0 || k > u16::MAX as u32 {
            return Err(ProbabilityError::InvalidParameters(format!(
                "port space size must be in 1..=65535, got {k}"
            )));
        }
        Self::new(1, k as u16)
    }

    pub fn lo(&self) -> u16 {
        self.lo
    }

    pub fn hi(&self) -> u16 {
        self.hi
    }

    /// Number of ports in the space (`K`).
    pub fn size(&self) -> u32 {
        self.hi as u32 - self.lo as u32 + 1
    }

    pub fn contains(&self, port: u16) -> bool {
        (self.lo..=self.hi).contains(&port)
    }

    /// The port at offset `index` from `lo`.
    pub fn port_at(&self, index: u32) -> u16 {
        debug_assert!(index < self.size());
        (self.lo as u32 + index) as u16
    }
}

impl Default for PortSpace {
    fn default() -> Self {
        Self {
            lo: Self::DEFAULT_LO,
            hi: Self::DEFAULT_HI,
        }
    }
}

impl fmt::Display for PortSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

/// Parameters of one birthday punch: how many ports the hard side keeps open,
/// and how fast and for how long the easy side probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub open_ports: u32,
    /// Probes per second.
    pub rate: f64,
    /// Seconds.
    pub duration: f64,
}

impl ProbePlan {
    pub fn new(open_ports: u32, rate: f64, duration: f64) -> Result<Self, ProbabilityError> {
        if !(rate.is_finite() && rate >= 0.0 && duration.is_finite() && duration >= 0.0) {
            return Err(ProbabilityError::InvalidParameters(format!(
                "rate and duration must be finite and non-negative (rate={rate}, duration={duration})"
            )));
        }
        Ok(Self {
            open_ports,
            rate,
            duration,
        })
    }

    /// Probe budget `A = floor(t * R)`.
    pub fn budget(&self) -> u32 {
        // Round-trip through a small epsilon so 0.1 * 100 does not become 9.
        let a = self.duration * self.rate;
        (a + 1e-9).floor().min(u32::MAX as f64) as u32
    }

    pub fn success_probability(&self, space: PortSpace) -> Result<Probability, ProbabilityError> {
        success_probability(space, self.open_ports, self.budget())
    }
}

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Probability(f64);

impl Probability {
    pub const ZERO: Probability = Probability(0.0);
    pub const ONE: Probability = Probability(1.0);

    pub fn new(value: f64) -> Result<Self, ProbabilityError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(ProbabilityError::InvalidParameters(format!(
                "probability must lie in [0, 1], got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn complement(self) -> f64 {
        1.0 - self.0
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.7}", self.0)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Incremental evaluation of the failure product, one probe at a time.
#[derive(Debug, Clone)]
struct FailureProduct {
    k: u32,
    b: u32,
    probes: u32,
    log_fail: CompensatedSum,
    certain: bool,
}

impl FailureProduct {
    fn new(k: u32, b: u32) -> Self {
        Self {
            k,
            b,
            probes: 0,
            log_fail: CompensatedSum::default(),
            certain: false,
        }
    }

    /// Multiply in the factor for probe index `probes`.
    fn step(&mut self) {
        let i = self.probes;
        self.probes += 1;
        if self.certain || self.b == 0 {
            return;
        }
        if i >= self.k - self.b {
            self.certain = true;
            return;
        }
        // ln((K-B-i)/(K-i)) = ln(1 - B/(K-i))
        let remaining = (self.k - i) as f64;
        self.log_fail.add((-(self.b as f64) / remaining).ln_1p());
    }

    fn success(&self) -> f64 {
        if self.certain {
            1.0
        } else {
            unit(-self.log_fail.value().exp_m1())
        }
    }
}

fn check_open_ports(space: PortSpace, open_ports: u32) -> Result<(), ProbabilityError> {
    if open_ports > space.size() {
        return Err(ProbabilityError::InvalidParameters(format!(
            "open ports B={open_ports} exceeds port space size K={}",
            space.size()
        )));
    }
    Ok(())
}

/// Clamp to [0, 1], folding -0.0 into 0.0.
fn unit(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p.min(1.0)
    }
}

/// Probability that `probes` distinct uniformly drawn ports hit at least one
/// of `open_ports` open mappings.
///
/// Returns exactly 1 once `probes > K - B`, since a pigeonhole hit is certain.
pub fn success_probability(
    space: PortSpace,
    open_ports: u32,
    probes: u32,
) -> Result<Probability, ProbabilityError> {
    check_open_ports(space, open_ports)?;
    let k = space.size();
    if open_ports == 0 || probes == 0 {
        return Ok(Probability::ZERO);
    }
    if probes > k - open_ports {
        return Ok(Probability::ONE);
    }
    let mut sum = CompensatedSum::default();
    for i in 0..probes {
        sum.add((-(open_ports as f64) / (k - i) as f64).ln_1p());
    }
    Ok(Probability(unit(-sum.value().exp_m1())))
}

/// Smallest probe budget whose success probability reaches `target`.
pub fn min_probes(space: PortSpace, open_ports: u32, target: f64) -> Result<u32, ProbabilityError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(ProbabilityError::InvalidParameters(format!(
            "target must lie in (0, 1], got {target}"
        )));
    }
    check_open_ports(space, open_ports)?;
    if open_ports == 0 {
        return Err(ProbabilityError::UnreachableTarget { target, open_ports });
    }
    let k = space.size();
    if target >= 1.0 {
        return Ok(k - open_ports + 1);
    }
    let mut product = FailureProduct::new(k, open_ports);
    while product.success() < target {
        product.step();
    }
    Ok(product.probes)
}

/// One point of a success curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub open_ports: u32,
    pub probes: u32,
    pub probability: Probability,
}

/// Success probability sampled at `0, step, 2*step, ...` up to `max_probes`
/// (which is always included) for each open-port count.
pub fn probability_curve(
    space: PortSpace,
    open_port_counts: &[u32],
    max_probes: u32,
    step: u32,
) -> Result<Vec<CurvePoint>, ProbabilityError> {
    if step == 0 {
        return Err(ProbabilityError::InvalidParameters(
            "curve step must be >= 1".into(),
        ));
    }
    for &b in open_port_counts {
        check_open_ports(space, b)?;
    }
    let mut rows = Vec::new();
    for &b in open_port_counts {
        let mut product = FailureProduct::new(space.size(), b);
        let mut next = 0u32;
        loop {
            while product.probes < next {
                product.step();
            }
            rows.push(CurvePoint {
                open_ports: b,
                probes: next,
                probability: Probability(product.success()),
            });
            if next == max_probes {
                break;
            }
            next = next.saturating_add(step).min(max_probes);
        }
    }
    Ok(rows)
}

/// The first `count` ports of a uniformly random permutation of `space`,
/// reproducible from `seed`.
///
/// This is a sparse Fisher-Yates shuffle, so only `O(count)` memory is used.
pub fn schedule_ports(space: PortSpace, count: u32, seed: u64) -> Result<Vec<u16>, ProbabilityError> {
    let k = space.size();
    if count > k {
        return Err(ProbabilityError::InvalidParameters(format!(
            "cannot schedule {count} distinct ports from a space of {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut swapped: std::collections::HashMap<u32, u32> =
        std::collections::HashMap::with_capacity(count as usize * 2);
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let j = rng.gen_range(i..k);
        let at_j = *swapped.get(&j).unwrap_or(&j);
        let at_i = *swapped.get(&i).unwrap_or(&i);
        swapped.insert(j, at_i);
        out.push(space.port_at(at_j));
    }
    Ok(out)
}

/// Success probability when each datagram of a probe/ack exchange is
/// independently lost with probability `loss`.
///
/// The number of probes that land on an open port is hypergeometric; each hit
/// completes only if both the probe and its acknowledgement survive, i.e. with
/// probability `(1 - loss)^2`.
pub fn lossy_success_probability(
    space: PortSpace,
    open_ports: u32,
    probes: u32,
    loss: f64,
) -> Result<Probability, ProbabilityError> {
    if !(0.0..=1.0).contains(&loss) {
        return Err(ProbabilityError::InvalidParameters(format!(
            "loss must lie in [0, 1], got {loss}"
        )));
    }
    check_open_ports(space, open_ports)?;
    let k = space.size() as u64;
    let b = open_ports as u64;
    let a = (probes as u64).min(k);
    let survive = (1.0 - loss) * (1.0 - loss);
    if survive >= 1.0 {
        return success_probability(space, open_ports, probes);
    }
    let log_miss = (1.0 - survive).ln();
    let h_max = a.min(b);
    let h_min = a.saturating_sub(k - b);
    let mut fail = 0.0;
    for h in h_min..=h_max {
        let log_pmf = ln_choose(b, h) + ln_choose(k - b, a - h) - ln_choose(k, a);
        let term = if h == 0 { log_pmf } else { log_pmf + h as f64 * log_miss };
        fail += term.exp();
    }
    Ok(Probability((1.0 - fail).clamp(0.0, 1.0)))
}

fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn ln_factorial(n: u64) -> f64 {
    // Exact summation is cheap for n <= 65535 and avoids Stirling error.
    thread_local! {
        static TABLE: std::cell::RefCell<Vec<f64>> = std::cell::RefCell::new(vec![0.0]);
    }
    TABLE.with(|t| {
        let mut t = t.borrow_mut();
        while t.len() <= n as usize {
            let i = t.len();
            let prev = t[i - 1];
            t.push(prev + (i as f64).ln());
        }
        t[n as usize]
    })
}
