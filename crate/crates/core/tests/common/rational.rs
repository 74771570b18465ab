use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svsnet::{compute_metrics, ConfusionCounts, MetricsReport};

fn q(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn div(a: BigRational, b: BigRational) -> Option<BigRational> {
    (!b.is_zero()).then(|| a / b)
}

/// Exact rational evaluation; square roots are taken once, at the end.
pub fn exact(c: ConfusionCounts) -> [Option<f64>; 10] {
    let (tp, tn, fp, fn_) = (q(c.tp), q(c.tn), q(c.fp), q(c.fn_));
    let n = &tp + &tn + &fp + &fn_;
    let accuracy = div(&tp + &tn, n.clone());
    let precision = div(tp.clone(), &tp + &fp);
    let recall = div(tp.clone(), &tp + &fn_);
    let specificity = div(tn.clone(), &tn + &fp);
    let fdr = div(fp.clone(), &tp + &fp);
    let f1 = match (&precision, &recall) {
        (Some(p), Some(r)) if !(p + r).is_zero() => Some(q(2) * p * r / (p + r)),
        (Some(_), Some(_)) => Some(q(0)),
        _ => None,
    };
    let auc = match (&recall, &specificity) {
        (Some(r), Some(s)) => Some((r + s) / q(2)),
        _ => None,
    };
    let g2 = match (&recall, &specificity) {
        (Some(r), Some(s)) => Some(r * s),
        _ => None,
    };
    let pe = ((&tp + &fn_) * (&tp + &fp) + (&tn + &fp) * (&tn + &fn_)) / (&n * &n);
    let kappa = div(accuracy.clone().unwrap() - &pe, q(1) - &pe);
    let f = |v: Option<BigRational>| v.map(|v| v.to_f64().unwrap());
    [
        f(accuracy),
        f(precision),
        f(recall),
        f(specificity),
        f(f1),
        f(auc),
        f(fdr),
        f(g2).map(f64::sqrt),
        f(kappa),
        f(Some(pe)),
    ]
}

pub fn fields(r: &MetricsReport) -> [Option<f64>; 10] {
    [
        r.accuracy,
        r.precision,
        r.recall,
        r.specificity,
        r.f1,
        r.auc,
        r.fdr,
        r.g_means,
        r.kappa,
        r.pe,
    ]
}

/// Compares `compute_metrics` with the rational evaluation on `n` random
/// quadruples and returns a description of every disagreement.
pub fn random_quadruple_mismatches(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    let mut compared = 0;
    while compared < n {
        // mix small counts (to hit zero denominators) with large ones
        let hi = if compared % 4 == 0 { 4 } else { 1_000_000 };
        let c = ConfusionCounts::new(
            rng.gen_range(0..hi),
            rng.gen_range(0..hi),
            rng.gen_range(0..hi),
            rng.gen_range(0..hi),
        );
        if c.total() == 0 {
            continue;
        }
        compared += 1;
        let got = fields(&compute_metrics(c).unwrap());
        for (k, (g, e)) in got.iter().zip(exact(c)).enumerate() {
            match (g, e) {
                (Some(g), Some(e)) if (g - e).abs() <= 1e-12 => {}
                (None, None) => {}
                _ => bad.push(format!("{c:?} field {k}: {g:?} vs {e:?}")),
            }
        }
    }
    bad
}
