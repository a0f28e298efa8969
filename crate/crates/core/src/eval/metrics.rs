use super::EvalError;

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::InvalidInput("NaN score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Runs of equal scores in descending order as `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let order = descending(scores);
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, the normalized Mann–Whitney statistic.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    // twice the U statistic, kept integral so the result is exact
    let mut twice_u: u64 = 0;
    let mut neg_below = neg;
    for (p, n) in tie_groups(scores, labels) {
        neg_below -= n;
        twice_u += 2 * p * neg_below + p * n;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Average precision: the mean over positives of the precision at the
/// threshold equal to that positive's score (tied scores share a threshold).
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let (mut tp, mut seen) = (0u64, 0u64);
    let mut total = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        seen += p + n;
        total += p as f64 * (tp as f64 / seen as f64);
    }
    Ok(total / pos as f64)
}

/// Macro-averaged metrics over tags plus per-tag values; tags with a single
/// class are `None` and left out of the averages.
#[derive(Clone, Debug, PartialEq)]
pub struct TagMetrics {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub per_tag: Vec<Option<(f64, f64)>>,
}

/// `scores[i][t]` and `labels[i][t]` for item `i`, tag `t`.
pub fn tag_metrics(scores: &[Vec<f64>], labels: &[Vec<f32>]) -> Result<TagMetrics, EvalError> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(EvalError::InvalidInput("score and label rows differ or are empty".into()));
    }
    let tags = labels[0].len();
    let mut per_tag = Vec::with_capacity(tags);
    for t in 0..tags {
        let s: Vec<f64> = scores.iter().map(|r| r[t]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[t] > 0.5).collect();
        per_tag.push(match roc_auc(&s, &l) {
            Ok(roc) => Some((roc, pr_auc(&s, &l)?)),
            Err(EvalError::SingleClass) => None,
            Err(e) => return Err(e),
        });
    }
    let used: Vec<(f64, f64)> = per_tag.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(EvalError::NoEvaluableTags);
    }
    let n = used.len() as f64;
    Ok(TagMetrics {
        roc_auc: used.iter().map(|m| m.0).sum::<f64>() / n,
        pr_auc: used.iter().map(|m| m.1).sum::<f64>() / n,
        per_tag,
    })
}

/// Mean fragment score per clip.
pub fn aggregate_clip(scores: &[Vec<f64>], clip_of: &[usize], n_clips: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    if scores.len() != clip_of.len() {
        return Err(EvalError::InvalidInput("clip map length differs from scores".into()));
    }
    let width = scores.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; width]; n_clips];
    let mut counts = vec![0usize; n_clips];
    for (row, &c) in scores.iter().zip(clip_of) {
        if c >= n_clips {
            return Err(EvalError::InvalidInput(format!("fragment maps to clip {c} of {n_clips}")));
        }
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(EvalError::EmptyClip(empty));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect())
}
