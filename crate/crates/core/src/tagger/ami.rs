//! Adjusted mutual information between two labelings, with the standard
//! hypergeometric expected-MI correction and max-entropy normalization.

/// Contingency table with compacted labels.
struct Contingency {
    counts: Vec<Vec<f64>>, // [u_clusters][v_clusters]
    a: Vec<f64>,           // row sums
    b: Vec<f64>,           // column sums
    n: f64,
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::BTreeMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len();
        let id = *map.entry(l).or_insert(next);
        out.push(id);
    }
    (out, map.len())
}

fn contingency(u: &[usize], v: &[usize]) -> Contingency {
    let (cu, nu) = compact(u);
    let (cv, nv) = compact(v);
    let mut counts = vec![vec![0.0; nv]; nu];
    for (&i, &j) in cu.iter().zip(&cv) {
        counts[i][j] += 1.0;
    }
    let a: Vec<f64> = counts.iter().map(|row| row.iter().sum()).collect();
    let b: Vec<f64> = (0..nv).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
    Contingency { counts, a, b, n: u.len() as f64 }
}

fn entropy(margins: &[f64], n: f64) -> f64 {
    margins
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| -(m / n) * (m / n).ln())
        .sum()
}

fn mutual_information(c: &Contingency) -> f64 {
    let mut mi = 0.0;
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += (nij / c.n) * ((c.n * nij) / (c.a[i] * c.b[j])).ln();
            }
        }
    }
    mi
}

/// E[MI] under the permutation (hypergeometric) model with both margins
/// fixed. `lf` is a ln-factorial table covering 0..=n.
fn expected_mi(a: &[f64], b: &[f64], n: f64, lf: &[f64]) -> f64 {
    let ln_fact = |x: f64| lf[x as usize];
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj - n).max(1.0);
            let hi = ai.min(bj);
            let mut nij = lo;
            while nij <= hi + 0.5 {
                let log_term = ln_fact(ai) + ln_fact(bj) + ln_fact(n - ai) + ln_fact(n - bj)
                    - ln_fact(n)
                    - ln_fact(nij)
                    - ln_fact(ai - nij)
                    - ln_fact(bj - nij)
                    - ln_fact(n - ai - bj + nij);
                emi += (nij / n) * ((n * nij) / (ai * bj)).ln() * log_term.exp();
                nij += 1.0;
            }
        }
    }
    emi
}

fn ln_factorial_table(n: usize) -> Vec<f64> {
    let mut lf = vec![0.0; n + 1];
    for k in 2..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    lf
}

/// Adjusted mutual information of two labelings over the same pixel domain.
/// Positions with `ignore` set are excluded before scoring. Degenerate
/// single-cluster cases score 1.0 when the partitions are identical and 0.0
/// otherwise.
pub fn ami_score(pred: &[usize], truth: &[usize], ignore: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "label domains differ");
    assert_eq!(pred.len(), ignore.len(), "ignore mask domain differs");
    let mut u = Vec::new();
    let mut v = Vec::new();
    for i in 0..pred.len() {
        if !ignore[i] {
            u.push(pred[i]);
            v.push(truth[i]);
        }
    }
    if u.is_empty() {
        return 0.0;
    }
    let (cu, _) = compact(&u);
    let (cv, _) = compact(&v);
    if cu == cv {
        return 1.0; // identical partitions up to relabeling
    }
    let c = contingency(&u, &v);
    let h_u = entropy(&c.a, c.n);
    let h_v = entropy(&c.b, c.n);
    let denom_base = h_u.max(h_v);
    if denom_base <= 0.0 {
        // one side is a single cluster and the partitions differ
        return 0.0;
    }
    let lf = ln_factorial_table(u.len());
    let emi = expected_mi(&c.a, &c.b, c.n, &lf);
    let mi = mutual_information(&c);
    let denom = denom_base - emi;
    if denom.abs() < 1e-15 {
        return 0.0;
    }
    (mi - emi) / denom
}

/// Hard assignment from stacked per-group probabilities [K, npix]:
/// pixelwise argmax.
pub fn argmax_groups(pi: &[f64], groups: usize, npix: usize) -> Vec<usize> {
    (0..npix)
        .map(|p| {
            let mut best = 0;
            for k in 1..groups {
                if pi[k * npix + p] > pi[best * npix + p] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
