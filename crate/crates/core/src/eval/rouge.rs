//! ROUGE-Lsum with union-LCS over newline-separated sentences.

fn sentences(text: &str) -> Vec<Vec<String>> {
    text.to_lowercase()
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

fn lcs_table<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Positions in `reference` matched by one LCS against `candidate`.
fn lcs_positions(reference: &[String], candidate: &[String]) -> Vec<usize> {
    let t = lcs_table(reference, candidate);
    let (mut i, mut j) = (reference.len(), candidate.len());
    let mut hits = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == candidate[j - 1] {
            hits.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    hits
}

/// F-score in `[0, 1]`. Lowercased, no stemming. Two empty texts score 0.
pub fn rouge_lsum(candidate: &str, reference: &str) -> f64 {
    let cand = sentences(candidate);
    let refs = sentences(reference);
    let n_cand: usize = cand.iter().map(Vec::len).sum();
    let n_ref: usize = refs.iter().map(Vec::len).sum();
    if n_cand == 0 || n_ref == 0 {
        if n_cand == 0 && n_ref == 0 {
            log::debug!("ROUGE-Lsum of two empty texts is defined as 0");
        }
        return 0.0;
    }
    let mut matches = 0usize;
    for r in &refs {
        let mut hit = vec![false; r.len()];
        for c in &cand {
            for p in lcs_positions(r, c) {
                hit[p] = true;
            }
        }
        matches += hit.iter().filter(|&&h| h).count();
    }
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / n_cand as f64;
    let r = matches as f64 / n_ref as f64;
    2.0 * p * r / (p + r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_examples() {
        assert_eq!(rouge_lsum("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge_lsum("a b c", "d e f"), 0.0);
        assert!((rouge_lsum("the cat sat", "the cat ran") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_lsum("", ""), 0.0);
    }

    #[test]
    fn case_is_ignored() {
        assert_eq!(rouge_lsum("The Cat", "the cat"), 1.0);
    }

    #[test]
    fn union_across_candidate_sentences() {
        // Each candidate sentence covers half the reference sentence.
        let f = rouge_lsum("a b\nc d", "a b c d");
        assert_eq!(f, 1.0);
    }
}
