//! Length-bounded beam search without length normalization.

use std::cmp::Ordering;

use crate::encoding::{EOS, SOS};
use crate::error::Result;

/// Next-symbol log-probabilities for a batch of decoding problems.
pub trait Scorer {
    fn vocab_size(&self) -> usize;
    /// One row of log-probabilities per `(problem, prefix)` request; every
    /// prefix starts with `<sos>`. Disallowed symbols are `-inf`.
    fn next_log_probs(&mut self, requests: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// `<sos>`, the emitted symbols, and a final `<eos>` once finished.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher log-probability first, then lexicographically smaller ids.
pub fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.ids.cmp(&b.ids))
}

/// Runs `max_len.len()` independent searches in lockstep. After `max_len[i]`
/// symbols a hypothesis of problem `i` is closed with a free `<eos>`.
pub fn beam_search(scorer: &mut dyn Scorer, k: usize, max_len: &[usize]) -> Result<Vec<BeamHypothesis>> {
    let k = k.max(1);
    let n = max_len.len();
    let start = BeamHypothesis {
        ids: vec![SOS],
        log_prob: 0.0,
        finished: false,
    };
    let mut live: Vec<Vec<BeamHypothesis>> = vec![vec![start]; n];
    let mut finished: Vec<Vec<BeamHypothesis>> = vec![Vec::new(); n];
    for (i, &m) in max_len.iter().enumerate() {
        if m == 0 {
            let mut h = live[i].pop().expect("start");
            h.ids.push(EOS);
            h.finished = true;
            finished[i].push(h);
        }
    }
    let mut step = 0;
    loop {
        step += 1;
        let requests: Vec<(usize, &[usize])> = live
            .iter()
            .enumerate()
            .flat_map(|(i, hs)| hs.iter().map(move |h| (i, h.ids.as_slice())))
            .collect();
        if requests.is_empty() {
            break;
        }
        let rows = scorer.next_log_probs(&requests)?;
        let mut row = rows.into_iter();
        for i in 0..n {
            let beams = std::mem::take(&mut live[i]);
            if beams.is_empty() {
                continue;
            }
            let mut candidates = Vec::with_capacity(beams.len() * scorer.vocab_size());
            for h in &beams {
                let lp = row.next().expect("one row per request");
                for (tok, &l) in lp.iter().enumerate() {
                    if !l.is_finite() {
                        continue;
                    }
                    let mut ids = h.ids.clone();
                    ids.push(tok);
                    let done = tok == EOS;
                    if !done && step >= max_len[i] {
                        ids.push(EOS);
                    }
                    candidates.push(BeamHypothesis {
                        ids,
                        log_prob: h.log_prob + l,
                        finished: done || step >= max_len[i],
                    });
                }
            }
            candidates.sort_by(rank);
            candidates.truncate(k);
            for c in candidates {
                if c.finished {
                    finished[i].push(c);
                } else {
                    live[i].push(c);
                }
            }
            // log-probabilities only fall, so no live beam can overtake
            let best_done = finished[i].iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if live[i].iter().all(|h| h.log_prob < best_done) {
                live[i].clear();
            }
        }
    }
    Ok(finished
        .into_iter()
        .map(|mut f| {
            f.sort_by(rank);
            f.into_iter().next().unwrap_or(BeamHypothesis {
                ids: vec![SOS, EOS],
                log_prob: f64::NEG_INFINITY,
                finished: true,
            })
        })
        .collect())
}

/// Single-problem convenience wrapper.
pub fn beam_decode(scorer: &mut dyn Scorer, k: usize, max_len: usize) -> Result<BeamHypothesis> {
    Ok(beam_search(scorer, k, &[max_len])?.remove(0))
}

/// Repeated argmax (lowest id on ties) until `<eos>` or `max_len` symbols.
pub fn greedy_decode(scorer: &mut dyn Scorer, max_len: usize) -> Result<BeamHypothesis> {
    let mut h = BeamHypothesis {
        ids: vec![SOS],
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(&[(0, h.ids.as_slice())])?.remove(0);
        let mut best = None;
        for (tok, &l) in lp.iter().enumerate() {
            if l.is_finite() && best.is_none_or(|(_, b)| l > b) {
                best = Some((tok, l));
            }
        }
        let Some((tok, l)) = best else { break };
        h.ids.push(tok);
        h.log_prob += l;
        if tok == EOS {
            h.finished = true;
            return Ok(h);
        }
    }
    h.ids.push(EOS);
    h.finished = true;
    Ok(h)
}

/// Log-softmax of `logits`, restricted to the symbols where `allowed` holds.
pub fn masked_log_softmax(logits: &[f32], allowed: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| (l as f64 - max).exp())
        .sum();
    let norm = max + sum.ln();
    logits
        .iter()
        .zip(allowed)
        .map(|(&l, &a)| if a { l as f64 - norm } else { f64::NEG_INFINITY })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed distribution per prefix length.
    struct Table(Vec<Vec<f64>>);

    impl Scorer for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn next_log_probs(&mut self, requests: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
            Ok(requests
                .iter()
                .map(|(_, p)| self.0[(p.len() - 1).min(self.0.len() - 1)].clone())
                .collect())
        }
    }

    #[test]
    fn forced_eos_at_max_len() {
        let ln = |p: f64| p.ln();
        let mut t = Table(vec![vec![f64::NEG_INFINITY, ln(0.1), ln(0.9)]]);
        let h = beam_decode(&mut t, 3, 2).unwrap();
        assert_eq!(h.ids, vec![SOS, 2, 2, EOS]);
        assert!((h.log_prob - 2.0 * ln(0.9)).abs() < 1e-12);
    }

    #[test]
    fn greedy_matches_k1() {
        let ln = |p: f64| p.ln();
        let mut t = Table(vec![
            vec![f64::NEG_INFINITY, ln(0.2), ln(0.5), ln(0.3)],
            vec![f64::NEG_INFINITY, ln(0.6), ln(0.2), ln(0.2)],
        ]);
        let b = beam_decode(&mut t, 1, 5).unwrap();
        let g = greedy_decode(&mut t, 5).unwrap();
        assert_eq!(b, g);
        assert_eq!(b.ids, vec![SOS, 2, EOS]);
    }

    #[test]
    fn wider_beam_finds_better_path() {
        let ln = |p: f64| p.ln();
        // greedy takes 2 (0.5) then must continue at 0.5 * 0.5;
        // stopping right away has probability 0.4
        let mut t = Table(vec![
            vec![f64::NEG_INFINITY, ln(0.4), ln(0.5), ln(0.1)],
            vec![f64::NEG_INFINITY, ln(0.5), ln(0.25), ln(0.25)],
        ]);
        assert_eq!(beam_decode(&mut t, 1, 4).unwrap().ids, vec![SOS, 2, EOS]);
        assert_eq!(beam_decode(&mut t, 2, 4).unwrap().ids, vec![SOS, EOS]);
    }

    #[test]
    fn masked_softmax_normalizes() {
        let lp = masked_log_softmax(&[1.0, 2.0, 3.0], &[true, false, true]);
        assert!(lp[1].is_infinite());
        let total: f64 = lp.iter().filter(|l| l.is_finite()).map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
