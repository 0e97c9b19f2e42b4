use super::DownstreamError;

/// Accuracy, macro-F1 and Cohen's kappa over a fixed class set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
}

/// `m[t][p]` counts trials of true class `t` predicted as `p`.
pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<usize>>, DownstreamError> {
    if y_true.len() != y_pred.len() {
        return Err(DownstreamError::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(DownstreamError::EmptyInput("no predictions to score".into()));
    }
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(DownstreamError::LabelOutOfRange {
                label: t.max(p),
                n_classes,
            });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Scores predictions over classes `0..n_classes`. A class absent from both
/// truth and prediction contributes an F1 of 0. When chance agreement is
/// total, kappa is 1 for perfect agreement and 0 otherwise.
pub fn metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Metrics, DownstreamError> {
    let m = confusion_matrix(y_true, y_pred, n_classes)?;
    Ok(metrics_from_confusion(&m))
}

pub fn metrics_from_confusion(m: &[Vec<usize>]) -> Metrics {
    let k = m.len();
    let n: usize = m.iter().flatten().sum();
    let nf = n as f64;
    let diag: usize = (0..k).map(|c| m[c][c]).sum();
    let accuracy = diag as f64 / nf;
    let row = |c: usize| m[c].iter().sum::<usize>();
    let col = |c: usize| m.iter().map(|r| r[c]).sum::<usize>();
    let macro_f1 = (0..k)
        .map(|c| {
            let tp = m[c][c];
            let denom = row(c) + col(c);
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / k.max(1) as f64;
    let p_e: f64 = (0..k).map(|c| (row(c) as f64 / nf) * (col(c) as f64 / nf)).sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        if diag == n {
            1.0
        } else {
            0.0
        }
    } else {
        (accuracy - p_e) / (1.0 - p_e)
    };
    Metrics {
        accuracy,
        macro_f1,
        kappa,
    }
}
