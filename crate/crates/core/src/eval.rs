//! Agreement metrics between predicted scores and opinion scores.
//!
//! SROCC is computed on raw predictions. PLCC and RMSE are computed after a
//! four-parameter logistic alignment
//! `m(x) = (η₁ − η₂) / (1 + exp(−(x − η₃)/|η₄|)) + η₂`
//! fitted by Levenberg–Marquardt least squares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERS: usize = 200;
const MIN_FIT_POINTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub srocc: f64,
    pub plcc: f64,
    pub rmse: f64,
    pub logistic_params: [f64; 4],
    pub n: usize,
    /// Set when the logistic fit was skipped or diverged and predictions were
    /// used unaligned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_warning: Option<String>,
}

fn check_pair(pred: &[f64], mos: &[f64], min: usize) -> Result<()> {
    if pred.len() != mos.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} scores",
            pred.len(),
            mos.len()
        )));
    }
    if pred.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "metric inputs".into(),
        });
    }
    Ok(())
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "an input has zero variance".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn srocc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos, 3)?;
    pearson(&average_ranks(pred), &average_ranks(mos))
}

pub fn plcc(aligned: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(aligned, mos, 3)?;
    pearson(aligned, mos)
}

pub fn rmse(aligned: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(aligned, mos, 1)?;
    let sse: f64 = aligned.iter().zip(mos).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / aligned.len() as f64).sqrt())
}

pub fn logistic4(params: &[f64; 4], x: f64) -> f64 {
    let [e1, e2, e3, e4] = *params;
    (e1 - e2) / (1.0 + (-(x - e3) / e4.abs()).exp()) + e2
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub params: [f64; 4],
    pub aligned: Vec<f64>,
    /// Sum of squared residuals at the initial guess and after fitting.
    pub initial_sse: f64,
    pub sse: f64,
    pub converged: bool,
}

fn sse(params: &[f64; 4], x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = logistic4(params, xi) - yi;
            r * r
        })
        .sum()
}

fn jacobian_row(p: &[f64; 4], x: f64) -> [f64; 4] {
    let [e1, e2, e3, e4] = *p;
    let a = e4.abs();
    let z = (x - e3) / a;
    let s = 1.0 / (1.0 + (-z).exp());
    let ds = s * (1.0 - s);
    let amp = e1 - e2;
    [
        s,
        1.0 - s,
        -amp * ds / a,
        -amp * ds * (x - e3) / (a * a) * e4.signum(),
    ]
}

/// Solves the 4×4 system `A·x = b` by Gaussian elimination with partial
/// pivoting. `None` when singular.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn levenberg_marquardt(x: &[f64], y: &[f64], start: [f64; 4]) -> ([f64; 4], f64, bool) {
    let mut p = start;
    let mut cost = sse(&p, x, y);
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..MAX_ITERS {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let j = jacobian_row(&p, xi);
            let r = logistic4(&p, xi) - yi;
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let grad_norm = jtr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm < 1e-14 {
            converged = true;
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj;
            for (k, row) in damped.iter_mut().enumerate() {
                row[k] += lambda * jtj[k][k].max(1e-12);
            }
            let Some(step) = solve4(damped, jtr.map(|v| -v)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
            let c = sse(&cand, x, y);
            if c.is_finite() && c < cost && cand[3] != 0.0 {
                let rel = (cost - c) / cost.max(1e-300);
                p = cand;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-15 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved || converged {
            converged = true;
            break;
        }
    }
    (p, cost, converged)
}

/// Fits the logistic alignment from the standard initialization
/// (η₁ = max mos, η₂ = min mos, η₃ = median pred, η₄ = std pred).
pub fn logistic4_fit(pred: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    check_pair(pred, mos, MIN_FIT_POINTS)?;
    let m = mean(pred);
    let std = (pred.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / pred.len() as f64).sqrt();
    if std == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant predictions cannot be aligned".into(),
        ));
    }
    let mut sorted = pred.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let max = mos.iter().copied().fold(f64::MIN, f64::max);
    let min = mos.iter().copied().fold(f64::MAX, f64::min);
    let start = [max, min, median, std];
    let initial_sse = sse(&start, pred, mos);
    let (mut params, mut cost, mut converged) = levenberg_marquardt(pred, mos, start);

    // the family contains the best constant (η₁ = η₂ = mean); never end
    // worse than it
    let mos_mean = mean(mos);
    let flat = [mos_mean, mos_mean, median, std];
    let flat_sse = sse(&flat, pred, mos);
    if !(cost <= flat_sse) {
        let (p2, c2, conv2) = levenberg_marquardt(pred, mos, flat);
        if c2 < cost || !cost.is_finite() {
            params = p2;
            cost = c2;
            converged = conv2;
        }
    }
    let aligned = pred.iter().map(|&x| logistic4(&params, x)).collect();
    Ok(LogisticFit {
        params,
        aligned,
        initial_sse,
        sse: cost,
        converged,
    })
}

/// SROCC on raw predictions, then logistic alignment, then PLCC/RMSE.
pub fn evaluate(pred: &[f64], mos: &[f64]) -> Result<MetricReport> {
    check_pair(pred, mos, 3)?;
    let s = srocc(pred, mos)?;
    let (aligned, params, warning) = if pred.len() < MIN_FIT_POINTS {
        (
            pred.to_vec(),
            [f64::NAN; 4],
            Some(format!(
                "logistic alignment needs {MIN_FIT_POINTS} samples; using raw predictions"
            )),
        )
    } else {
        let fit = logistic4_fit(pred, mos)?;
        if fit.aligned.iter().all(|v| v.is_finite()) && fit.sse.is_finite() {
            (fit.aligned, fit.params, None)
        } else {
            log::warn!("logistic fit diverged; reporting unaligned predictions");
            (
                pred.to_vec(),
                fit.params,
                Some("logistic fit diverged; using raw predictions".into()),
            )
        }
    };
    Ok(MetricReport {
        srocc: s,
        plcc: plcc(&aligned, mos)?,
        rmse: rmse(&aligned, mos)?,
        logistic_params: params,
        n: pred.len(),
        alignment_warning: warning,
    })
}
