use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Split;
use crate::error::{Error, Result};

/// Seeded order in which items interleave across classes: each class is
/// shuffled, then item `r` of a class of size `c` sorts at `(r + 0.5) / c`.
/// Any prefix of this order is close to stratified.
fn stratified_order(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keyed = Vec::with_capacity(labels.len());
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(rng);
        let n = members.len() as f64;
        for (r, &i) in members.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / n, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

/// Seeded stratified holdout: `round(test_frac · n)` items go to test, then
/// `floor(val_frac · n_train)` of the remainder go to validation.
pub fn holdout_split(labels: &[usize], test_frac: f64, val_frac: f64, seed: u64) -> Result<Vec<Split>> {
    for (name, f) in [("test fraction", test_frac), ("validation fraction", val_frac)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("{name} {f} outside [0, 1)")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = stratified_order(labels, &mut rng);
    let n = labels.len();
    let n_test = (test_frac * n as f64).round() as usize;
    let n_val = (val_frac * (n - n_test) as f64).floor() as usize;
    let mut splits = vec![Split::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos < n_test {
            splits[i] = Split::Test;
        } else if pos < n_test + n_val {
            splits[i] = Split::Val;
        }
    }
    Ok(splits)
}

/// Fold id per item for `folds`-fold cross-validation.
///
/// Stratified by class unless some class has fewer members than `folds`,
/// in which case items are shuffled without regard to class.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if labels.len() < folds {
        return Err(Error::Dataset(format!(
            "{} items cannot fill {folds} folds",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; labels.iter().copied().max().map_or(0, |m| m + 1)];
    for &l in labels {
        counts[l] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; labels.len()];
    if counts.iter().any(|&c| c > 0 && c < folds) {
        log::warn!("a class has fewer than {folds} members; using non-stratified folds");
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % folds;
        }
        return Ok(fold_of);
    }
    // Deal each shuffled class round-robin, continuing where the previous
    // class stopped so fold sizes differ by at most one.
    let mut next = 0;
    for class in 0..counts.len() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % folds;
            next += 1;
        }
    }
    Ok(fold_of)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(splits: &[Split], labels: &[usize], which: Split, class: usize) -> usize {
        splits
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s == which && **l == class)
            .count()
    }

    #[test]
    fn holdout_is_stratified_and_sized() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let s = holdout_split(&labels, 0.3, 0.1, 3).unwrap();
        for c in 0..4 {
            assert_eq!(count(&s, &labels, Split::Test, c), 15);
        }
        assert_eq!(s.iter().filter(|x| **x == Split::Val).count(), 14);
        assert_eq!(s, holdout_split(&labels, 0.3, 0.1, 3).unwrap());
        assert_ne!(s, holdout_split(&labels, 0.3, 0.1, 4).unwrap());
    }

    #[test]
    fn tiny_training_portion_gets_no_validation() {
        let s = holdout_split(&[0, 1, 0, 1], 0.5, 0.1, 1).unwrap();
        assert_eq!(s.iter().filter(|x| **x == Split::Val).count(), 0);
        assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), 2);
    }

    #[test]
    fn folds_balance_classes() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let f = stratified_folds(&labels, 10, 7).unwrap();
        for k in 0..10 {
            for c in 0..2 {
                let n = f.iter().zip(&labels).filter(|(fk, l)| **fk == k && **l == c).count();
                assert_eq!(n, 5);
            }
        }
    }

    #[test]
    fn folds_fall_back_for_rare_classes() {
        let mut labels = vec![0usize; 20];
        labels[0] = 1;
        let f = stratified_folds(&labels, 5, 1).unwrap();
        for k in 0..5 {
            assert_eq!(f.iter().filter(|x| **x == k).count(), 4);
        }
        assert!(stratified_folds(&labels, 1, 1).is_err());
        assert!(stratified_folds(&[0, 1], 3, 1).is_err());
    }
}
