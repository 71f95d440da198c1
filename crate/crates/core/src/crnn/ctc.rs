use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `label`: one per symbol plus a separating
/// blank between equal neighbours.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|p| p[0] == p[1]).count()
}

fn check_label(label: &[usize], classes: usize, steps: usize) -> Result<()> {
    let blank = classes - 1;
    if let Some(&bad) = label.iter().find(|&&l| l >= blank) {
        return Err(Error::InvalidLabel {
            label: format!("{label:?}"),
            reason: if bad == blank {
                "contains the blank index".into()
            } else {
                format!("index {bad} outside {classes} classes")
            },
        });
    }
    let required = min_frames(label);
    if steps < required {
        return Err(Error::LabelTooLong {
            label_len: label.len(),
            required,
            steps,
        });
    }
    Ok(())
}

/// `-ln p(label | lp)` and its gradient with respect to `lp`, for one
/// `(T, C)` block of log-probabilities. The blank is class `C - 1`.
fn ctc_single(lp: &[f64], t_len: usize, c: usize, label: &[usize]) -> (f64, Vec<f64>) {
    let blank = c - 1;
    // Extended label: blank, l1, blank, l2, ..., blank.
    let s_len = 2 * label.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { blank } else { label[s / 2] };
    // Transition s-2 -> s allowed for non-blank symbols that differ from s-2.
    let skip = |s: usize| s >= 2 && s % 2 == 1 && ext(s) != ext(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[blank];
    if s_len > 1 {
        alpha[1] = lp[ext(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * c + ext(s)];
        }
    }
    // beta[t][s]: log-prob of emitting frames t+1.. given state s at t.
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp[(t + 1) * c + ext(s2)];
            let mut b = next(s);
            if s + 1 < s_len {
                b = log_add(b, next(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }

    let mut grad = vec![0.0; t_len * c];
    if log_p.is_finite() {
        for t in 0..t_len {
            let mut acc = vec![ninf; c];
            for s in 0..s_len {
                let k = ext(s);
                acc[k] = log_add(acc[k], alpha[t * s_len + s] + beta[t * s_len + s]);
            }
            for (g, a) in grad[t * c..][..c].iter_mut().zip(acc) {
                *g = -(a - log_p).exp();
            }
        }
    }
    (-log_p, grad)
}

/// Mean CTC loss over a batch of `(N, T, C)` log-probabilities. The last
/// class is the blank; labels must not contain it.
///
/// Per sample this is `-ln Σ p(path)` over every frame path that collapses
/// (merge repeats, drop blanks) to the label, computed with the forward
/// recursion in log space.
pub fn ctc_loss<'t, F: Element>(log_probs: &Var<'t, F>, labels: &[Vec<usize>]) -> Result<Var<'t, F>> {
    let v = log_probs.value();
    let [n, t_len, c] = *v.shape() else {
        return Err(Error::InvalidShape {
            shape: v.shape().to_vec(),
            reason: "ctc_loss expects (batch, steps, classes)".into(),
        });
    };
    if labels.len() != n {
        return Err(Error::shape("ctc_loss labels", &[labels.len()], &[n]));
    }
    if n == 0 || t_len == 0 || c < 2 {
        return Err(Error::InvalidShape {
            shape: v.shape().to_vec(),
            reason: "ctc_loss needs a nonempty batch, at least one step and two classes".into(),
        });
    }
    for l in labels {
        check_label(l, c, t_len)?;
    }
    let lp: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
    let block = t_len * c;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n * block);
    for (i, label) in labels.iter().enumerate() {
        let (loss, g) = ctc_single(&lp[i * block..][..block], t_len, c, label);
        total += loss;
        grad.extend(g);
    }
    let inv_n = 1.0 / n as f64;
    let shape = v.shape().to_vec();
    Ok(log_probs.tape.record(
        Tensor::scalar(F::lit(total * inv_n)),
        &[*log_probs],
        Box::new(move |g, _| {
            let s = g.data()[0].as_f64() * inv_n;
            let data = grad.iter().map(|&d| F::lit(d * s)).collect();
            vec![Some(Tensor::from_parts(shape.clone(), data))]
        }),
    ))
}

/// Per-frame argmax, merge adjacent repeats, drop blanks (class `C - 1`).
/// Works on `(T, C)` or `(N, T, C)`; returns one index sequence per sample.
pub fn ctc_greedy_decode<F: Element>(log_probs: &Tensor<F>) -> Result<Vec<Vec<usize>>> {
    let (n, t_len, c) = match *log_probs.shape() {
        [t, c] => (1, t, c),
        [n, t, c] => (n, t, c),
        _ => {
            return Err(Error::InvalidShape {
                shape: log_probs.shape().to_vec(),
                reason: "greedy decode expects (steps, classes) or (batch, steps, classes)".into(),
            })
        }
    };
    if c == 0 {
        return Ok(vec![Vec::new(); n]);
    }
    let blank = c - 1;
    let d = log_probs.data();
    Ok((0..n)
        .map(|i| {
            let mut out = Vec::new();
            let mut prev = None;
            for t in 0..t_len {
                let row = &d[(i * t_len + t) * c..][..c];
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                if best != blank && prev != Some(best) {
                    out.push(best);
                }
                prev = Some(best);
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::{Rng, Tape};

    fn random_log_probs(rng: &mut Rng, n: usize, t: usize, c: usize) -> Tensor<f64> {
        let raw: Tensor<f64> = rng.randn([n, t, c]);
        let tape = Tape::new();
        tape.constant(raw).log_softmax().value()
    }

    /// Sums the probability of every one of the `C^T` frame paths that
    /// collapse to `label`.
    fn brute_force(lp: &[f64], t: usize, c: usize, label: &[usize]) -> f64 {
        let blank = c - 1;
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &k in &path {
                if k != blank && prev != Some(k) {
                    collapsed.push(k);
                }
                prev = Some(k);
            }
            if collapsed == label {
                total += path.iter().enumerate().map(|(i, &k)| lp[i * c + k]).sum::<f64>().exp();
            }
            // Odometer increment.
            let mut i = 0;
            while i < t {
                path[i] += 1;
                if path[i] < c {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
            if i == t {
                break;
            }
        }
        -total.ln()
    }

    fn loss_of(lp: &Tensor<f64>, labels: &[Vec<usize>]) -> Result<f64> {
        let tape = Tape::new();
        ctc_loss(&tape.constant(lp.clone()), labels).map(|l| l.value().item().unwrap())
    }

    #[test]
    fn single_frame_single_symbol() {
        let lp = Tensor::from_f64([1, 1, 3], &[0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]).unwrap();
        let l = loss_of(&lp, &[vec![1]]).unwrap();
        assert!((l + 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        // classes: a = 0, blank = 1
        let (p1a, p2a): (f64, f64) = (0.7, 0.4);
        let lp = Tensor::from_f64(
            [1, 2, 2],
            &[p1a.ln(), (1.0 - p1a).ln(), p2a.ln(), (1.0 - p2a).ln()],
        )
        .unwrap();
        let want = -(p1a * p2a + p1a * (1.0 - p2a) + (1.0 - p1a) * p2a).ln();
        assert!((loss_of(&lp, &[vec![0]]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = Rng::new(2024);
        let mut checked = 0;
        while checked < 300 {
            let t = 1 + rng.below(6) as usize;
            let c = 2 + rng.below(3) as usize;
            let len = rng.below(4) as usize;
            let label: Vec<usize> = (0..len).map(|_| rng.below(c as u64 - 1) as usize).collect();
            let lp = random_log_probs(&mut rng, 1, t, c);
            match loss_of(&lp, &[label.clone()]) {
                Ok(l) => {
                    let want = brute_force(lp.data(), t, c, &label);
                    assert!((l - want).abs() < 1e-9, "t={t} c={c} {label:?}: {l} vs {want}");
                    assert!(l >= 0.0);
                    checked += 1;
                }
                Err(Error::LabelTooLong { .. }) => {
                    // Infeasible: no path collapses to the label.
                    assert!(brute_force(lp.data(), t, c, &label).is_infinite());
                }
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn batch_loss_is_the_mean() {
        let mut rng = Rng::new(5);
        let lp = random_log_probs(&mut rng, 2, 5, 4);
        let labels = vec![vec![0, 1], vec![2, 2]];
        let both = loss_of(&lp, &labels).unwrap();
        let a = brute_force(&lp.data()[..20], 5, 4, &labels[0]);
        let b = brute_force(&lp.data()[20..], 5, 4, &labels[1]);
        assert!((both - (a + b) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(9);
        let lp = random_log_probs(&mut rng, 2, 6, 4);
        let labels = vec![vec![0, 1, 1], vec![2]];
        let err = gradcheck::check(&[lp], |_, v| ctc_loss(&v[0], &labels).unwrap());
        assert!(err < 1e-4, "relative error {err}");
        // Through a log-softmax, as used in training.
        let raw: Tensor<f64> = rng.randn([1, 5, 3]);
        let err = gradcheck::check(&[raw], |_, v| ctc_loss(&v[0].log_softmax(), &[vec![0, 1]]).unwrap());
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn rejects_bad_labels() {
        let lp = random_log_probs(&mut Rng::new(1), 1, 3, 4);
        assert!(matches!(loss_of(&lp, &[vec![3]]), Err(Error::InvalidLabel { .. })));
        assert!(matches!(loss_of(&lp, &[vec![7]]), Err(Error::InvalidLabel { .. })));
        assert!(matches!(loss_of(&lp, &[vec![0, 1, 2, 0]]), Err(Error::LabelTooLong { .. })));
        // Repeats need a blank in between.
        assert!(matches!(loss_of(&lp, &[vec![1, 1, 1]]), Err(Error::LabelTooLong { required: 5, .. })));
        assert!(loss_of(&lp, &[vec![0, 0]]).is_ok());
        assert!(loss_of(&lp, &[vec![0], vec![1]]).is_err());
    }

    #[test]
    fn shuffling_frames_changes_the_loss() {
        let mut rng = Rng::new(3);
        let lp = random_log_probs(&mut rng, 1, 4, 3);
        let d = lp.data();
        let flipped: Vec<f64> = d.chunks(3).rev().flatten().copied().collect();
        let lf = Tensor::from_f64([1, 4, 3], &flipped).unwrap();
        let label = vec![0, 1];
        assert!((loss_of(&lp, &[label.clone()]).unwrap() - loss_of(&lf, &[label]).unwrap()).abs() > 1e-6);
    }

    fn one_hot(path: &[usize], c: usize) -> Tensor<f64> {
        let mut d = vec![-10.0; path.len() * c];
        for (t, &k) in path.iter().enumerate() {
            d[t * c + k] = 0.0;
        }
        Tensor::from_f64([path.len(), c], &d).unwrap()
    }

    #[test]
    fn greedy_collapse_rules() {
        let b = 11;
        assert_eq!(ctc_greedy_decode(&one_hot(&[2, 2, b, 2], 12)).unwrap(), vec![vec![2, 2]]);
        assert_eq!(ctc_greedy_decode(&one_hot(&[b, b, b], 12)).unwrap(), vec![Vec::<usize>::new()]);
        assert_eq!(ctc_greedy_decode(&one_hot(&[1, b, b, 1, 9], 12)).unwrap(), vec![vec![1, 1, 9]]);
    }

    #[test]
    fn greedy_recovers_blank_separated_strings() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let s: Vec<usize> = (0..10).map(|_| rng.below(11) as usize).collect();
            let mut path = Vec::new();
            for &k in &s {
                path.extend([k, k, 11]);
            }
            assert_eq!(ctc_greedy_decode(&one_hot(&path, 12)).unwrap(), vec![s]);
        }
    }
}
