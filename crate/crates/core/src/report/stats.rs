use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

use super::run::RunRecord;

/// A Z statistic and its two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p: f64,
}

fn two_sided(z: f64) -> f64 {
    if z == 0.0 {
        return 1.0;
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * n.cdf(-z.abs())).min(1.0)
}

/// Pooled two-proportion test of success rates `p1` over `n1` trials and
/// `p2` over `n2`.
pub fn two_proportion_z(p1: f64, n1: usize, p2: f64, n2: usize) -> ZTest {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (p1 * n1f + p2 * n2f) / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    let z = if p1 == p2 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY.copysign(p1 - p2)
    } else {
        (p1 - p2) / se
    };
    ZTest { z, p: two_sided(z) }
}

/// Test of the mean of paired differences `a_i - b_i` against zero, with
/// the sample standard deviation of the differences.
pub fn paired_z(a: &[f64], b: &[f64]) -> Result<ZTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Usage("insufficient replicates: a paired test needs at least 2 seeds".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    let z = if mean == 0.0 {
        0.0
    } else if sd == 0.0 {
        f64::INFINITY.copysign(mean)
    } else {
        mean / (sd / (d.len() as f64).sqrt())
    };
    Ok(ZTest { z, p: two_sided(z) })
}

/// Mean and sample (n - 1) standard deviation; the deviation is 0 for
/// fewer than two values.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub labeled_count: usize,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub seeds: usize,
    pub rounds: Vec<RoundSummary>,
    /// Pooled two-proportion test on the final metrics.
    pub two_proportion: Option<ZTest>,
    /// Paired seed-wise test on the final metrics.
    pub paired: Option<ZTest>,
    /// Why significance was not computed, if it was not.
    pub note: Option<String>,
}

/// Compare two record sets seed by seed. Both must cover the same seeds
/// with the same labeled-count trajectory.
pub fn compare(a: &[RunRecord], b: &[RunRecord]) -> Result<Comparison> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("compare needs records on both sides".into()));
    }
    let mut a: Vec<&RunRecord> = a.iter().collect();
    let mut b: Vec<&RunRecord> = b.iter().collect();
    a.sort_by_key(|r| r.seed);
    b.sort_by_key(|r| r.seed);
    let seeds_a: Vec<u64> = a.iter().map(|r| r.seed).collect();
    let seeds_b: Vec<u64> = b.iter().map(|r| r.seed).collect();
    if seeds_a != seeds_b {
        return Err(Error::Config(format!("seed sets differ: {seeds_a:?} vs {seeds_b:?}")));
    }
    let counts = |r: &RunRecord| r.rounds.iter().map(|x| x.labeled_count).collect::<Vec<_>>();
    let schedule = counts(a[0]);
    if let Some(r) = a.iter().chain(&b).find(|r| counts(r) != schedule) {
        return Err(Error::Config(format!(
            "mismatched schedules: seed {} of {} labels {:?}, expected {schedule:?}",
            r.seed,
            r.acquisition,
            counts(r)
        )));
    }
    let rounds = schedule
        .iter()
        .enumerate()
        .map(|(i, &labeled_count)| {
            let va: Vec<f64> = a.iter().map(|r| r.rounds[i].val_metric).collect();
            let vb: Vec<f64> = b.iter().map(|r| r.rounds[i].val_metric).collect();
            let (mean_a, std_a) = mean_std(&va);
            let (mean_b, std_b) = mean_std(&vb);
            RoundSummary {
                labeled_count,
                mean_a,
                std_a,
                mean_b,
                std_b,
            }
        })
        .collect();
    let fa: Vec<f64> = a.iter().map(|r| r.final_metric().expect("nonempty rounds")).collect();
    let fb: Vec<f64> = b.iter().map(|r| r.final_metric().expect("nonempty rounds")).collect();
    let (two_proportion, paired, note) = if a.len() < 2 {
        (None, None, Some("insufficient replicates: significance needs at least 2 seeds".to_owned()))
    } else {
        let na: usize = a.iter().map(|r| r.eval_count).sum();
        let nb: usize = b.iter().map(|r| r.eval_count).sum();
        let (ma, mb) = (mean_std(&fa).0, mean_std(&fb).0);
        (Some(two_proportion_z(ma, na, mb, nb)), Some(paired_z(&fa, &fb)?), None)
    };
    Ok(Comparison {
        method_a: a[0].acquisition.clone(),
        method_b: b[0].acquisition.clone(),
        seeds: a.len(),
        rounds,
        two_proportion,
        paired,
        note,
    })
}

/// Learning curves as CSV `method,seed,labeled_count,metric`, ordered by
/// method, seed and round.
pub fn curves(records: &[RunRecord]) -> String {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|x, y| x.acquisition.cmp(&y.acquisition).then(x.seed.cmp(&y.seed)));
    let mut out = String::from("method,seed,labeled_count,metric\n");
    for r in sorted {
        for round in &r.rounds {
            out.push_str(&format!("{},{},{},{}\n", r.acquisition, r.seed, round.labeled_count, round.val_metric));
        }
    }
    out
}
