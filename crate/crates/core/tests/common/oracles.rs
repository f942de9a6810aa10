//! Exhaustive, deliberately naive reference implementations.

/// Pairwise Mann-Whitney: wins plus half ties over all `|pos|·|neg|` pairs.
pub fn auroc_pairs(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &p in pos {
        for &n in neg {
            if p > n {
                twice += 2;
            } else if p == n {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Confusion counts `(tp, fp)` when everything scoring at least `t` is
/// called positive.
fn counts_at(pos: &[f64], neg: &[f64], t: f64) -> (u64, u64) {
    let tp = pos.iter().filter(|&&s| s >= t).count() as u64;
    let fp = neg.iter().filter(|&&s| s >= t).count() as u64;
    (tp, fp)
}

/// Every distinct score, highest first.
fn thresholds(pos: &[f64], neg: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = pos.iter().chain(neg).copied().collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduced fraction `num / den`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub num: u128,
    pub den: u128,
}

impl Ratio {
    fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    fn add(self, o: Ratio) -> Ratio {
        let g = gcd(self.den, o.den);
        let den = self.den / g * o.den;
        Ratio::new(self.num * (den / self.den) + o.num * (den / o.den), den)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Average precision `Σ (R_i − R_{i−1}) P_i` over the threshold sweep, in
/// exact rational arithmetic.
pub fn average_precision_exact(pos: &[f64], neg: &[f64]) -> Ratio {
    let total = pos.len() as u128;
    let mut ap = Ratio::new(0, 1);
    let mut prev_tp = 0u128;
    for t in thresholds(pos, neg) {
        let (tp, fp) = counts_at(pos, neg, t);
        let (tp, fp) = (tp as u128, fp as u128);
        if tp > prev_tp {
            // (tp − prev)/P · tp/(tp + fp)
            ap = ap.add(Ratio::new((tp - prev_tp) * tp, total * (tp + fp)));
        }
        prev_tp = tp;
    }
    ap
}

/// FPR at the highest threshold whose TPR reaches `target`.
pub fn fpr_at_tpr_sweep(pos: &[f64], neg: &[f64], target: f64) -> f64 {
    for t in thresholds(pos, neg) {
        let (tp, fp) = counts_at(pos, neg, t);
        if tp as f64 / pos.len() as f64 >= target {
            return fp as f64 / neg.len() as f64;
        }
    }
    1.0
}

/// Equal-count bins: record indices of each bin after ordering by
/// confidence, ties broken by input position.
pub fn equal_count_bins(conf: &[f64], bins: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[a].partial_cmp(&conf[b]).unwrap().then(a.cmp(&b)));
    let mut sizes = vec![0usize; bins];
    // deal records out one at a time, lowest bins first
    for i in 0..conf.len() {
        sizes[i % bins] += 1;
    }
    let mut out = Vec::with_capacity(bins);
    let mut it = order.into_iter();
    for s in sizes {
        out.push(it.by_ref().take(s).collect());
    }
    out
}

/// `KL[N(μ₁, σ₁²) ‖ N(μ₂, σ₂²)]` summed over independent coordinates.
pub fn diagonal_gaussian_kl(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    (0..mu1.len())
        .map(|i| {
            let r = var1[i] / var2[i];
            0.5 * (r + (mu1[i] - mu2[i]).powi(2) / var2[i] - 1.0 - r.ln())
        })
        .sum()
}

/// Mean and standard error of a sample.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
