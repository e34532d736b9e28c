//! Rank and linear correlation between predicted and ground-truth scores.
//!
//! Degenerate inputs (zero variance after ranking) have no defined
//! correlation; both metrics then return `NaN` and log a warning, so a
//! caller can tell "undefined" apart from any real value in [-1, 1].

use crate::{Error, Result};

fn check(op: &str, pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("{op}: lengths differ ({} vs {})", pred.len(), gt.len())));
    }
    if pred.len() < 3 {
        return Err(Error::InvalidArgument(format!("{op}: need at least 3 pairs, got {}", pred.len())));
    }
    if let Some(i) = pred.iter().chain(gt).position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{op}: value {i} is not finite")));
    }
    Ok(())
}

/// Fractional ranks starting at 1; tied values share the mean of their ranks.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        log::warn!("correlation undefined: zero variance");
        return f64::NAN;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman correlation: Pearson correlation of midranks.
pub fn srocc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check("srocc", pred, gt)?;
    Ok(pearson(&midranks(pred), &midranks(gt)))
}

/// Pearson correlation of the raw values; no nonlinear mapping is fitted.
pub fn plcc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check("plcc", pred, gt)?;
    Ok(pearson(pred, gt))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1); zero for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
