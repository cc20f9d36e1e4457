//! Lifted structured embedding losses and batch pair mining.
//!
//! The continuous variant treats positiveness as relative: a same-room pair
//! `(i, j)` is contracted while every cross-room pair and every same-room
//! pair that is physically at least as far apart ("pseudo-negatives") is
//! pushed apart, so feature distance learns to rank physical distance.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::omni::gaussian_rotation_mask;
use crate::tensor::{Real, Tape, Var};

/// Pose labels attached to a training image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleLabel {
    pub room: usize,
    /// Exemplar group for the discrete-label baselines.
    pub place: usize,
    pub position: [f64; 2],
    /// Rotation bin in `0..w`.
    pub rotation: usize,
}

impl SampleLabel {
    pub fn distance(&self, other: &SampleLabel) -> f64 {
        let dx = self.position[0] - other.position[0];
        let dy = self.position[1] - other.position[1];
        dx.hypot(dy)
    }
}

/// Pseudo-negative partners for one positive pair `(i, j)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PseudoNegatives {
    /// `k` with `(i, k)` in PN_i(j).
    pub of_i: Vec<usize>,
    /// `l` with `(j, l)` in PN_j(i).
    pub of_j: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSets {
    /// Positive pairs, normalized so that `i < j`.
    pub positives: Vec<(usize, usize)>,
    /// Pairs with different labels, `i < k`.
    pub negatives: Vec<(usize, usize)>,
    /// One entry per positive pair, parallel to `positives`.
    pub pseudo_negatives: Vec<PseudoNegatives>,
}

impl PairSets {
    /// Partners of `i` in the negative set.
    pub fn negatives_of(&self, i: usize) -> Vec<usize> {
        self.negatives
            .iter()
            .filter_map(|&(a, b)| match (a == i, b == i) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Positive draws per sample that has a same-label partner.
    pub positives_per_sample: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            positives_per_sample: 1,
        }
    }
}

fn sample_positives<R: Rng>(
    n: usize,
    same: impl Fn(usize, usize) -> bool,
    config: &MiningConfig,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let mut seen = BTreeSet::new();
    let mut positives = Vec::new();
    for i in 0..n {
        let partners: Vec<usize> = (0..n).filter(|&j| j != i && same(i, j)).collect();
        if partners.is_empty() {
            continue;
        }
        for _ in 0..config.positives_per_sample {
            let j = *partners.choose(rng).expect("non-empty");
            let pair = (i.min(j), i.max(j));
            if seen.insert(pair) {
                positives.push(pair);
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    Ok(positives)
}

/// Room-based mining for the continuous loss: positives are sampled
/// same-room pairs, negatives are all cross-room pairs, and for a positive
/// `(i, j)` the pseudo-negatives of `i` are the other same-room samples `k`
/// with `d(i, k) ≥ d(i, j)` (symmetrically for `j`).
pub fn mine_pairs<R: Rng>(
    batch: &[SampleLabel],
    config: &MiningConfig,
    rng: &mut R,
) -> Result<PairSets> {
    let n = batch.len();
    let positives = sample_positives(n, |a, b| batch[a].room == batch[b].room, config, rng)?;
    let negatives = cross_pairs(n, |a, b| batch[a].room != batch[b].room);
    let pseudo = |anchor: usize, other: usize| -> Vec<usize> {
        let d = batch[anchor].distance(&batch[other]);
        (0..n)
            .filter(|&k| {
                k != anchor
                    && k != other
                    && batch[k].room == batch[anchor].room
                    && batch[anchor].distance(&batch[k]) >= d
            })
            .collect()
    };
    let pseudo_negatives = positives
        .iter()
        .map(|&(i, j)| PseudoNegatives {
            of_i: pseudo(i, j),
            of_j: pseudo(j, i),
        })
        .collect();
    Ok(PairSets {
        positives,
        negatives,
        pseudo_negatives,
    })
}

/// Discrete-label mining for the original lifted loss: positives share a
/// place label, negatives differ, no pseudo-negatives.
pub fn mine_class_pairs<R: Rng>(
    batch: &[SampleLabel],
    config: &MiningConfig,
    rng: &mut R,
) -> Result<PairSets> {
    let n = batch.len();
    let positives = sample_positives(n, |a, b| batch[a].place == batch[b].place, config, rng)?;
    let negatives = cross_pairs(n, |a, b| batch[a].place != batch[b].place);
    let pseudo_negatives = vec![PseudoNegatives::default(); positives.len()];
    Ok(PairSets {
        positives,
        negatives,
        pseudo_negatives,
    })
}

fn cross_pairs(n: usize, differ: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |k| (i, k)))
        .filter(|&(i, k)| differ(i, k))
        .collect()
}

/// `(r_j − r_i) mod w`
pub fn relative_rotation(ri: usize, rj: usize, w: usize) -> usize {
    (rj % w + w - ri % w) % w
}

fn check_pairs(pairs: &PairSets, n: usize) -> Result<()> {
    if pairs.positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    if pairs.pseudo_negatives.len() != pairs.positives.len() {
        return Err(Error::invalid(
            "pseudo-negative lists must parallel the positive pairs",
        ));
    }
    let out_of_range = pairs
        .positives
        .iter()
        .chain(&pairs.negatives)
        .any(|&(a, b)| a >= n || b >= n)
        || pairs
            .pseudo_negatives
            .iter()
            .any(|p| p.of_i.iter().chain(&p.of_j).any(|&k| k >= n));
    if out_of_range {
        return Err(Error::invalid("pair index outside the batch"));
    }
    Ok(())
}

/// `max(0, J_ij)²` averaged as `1 / (2|P|)`.
fn hinge_square_mean<T: Real>(tape: &mut Tape<T>, per_pair: &[Var]) -> Result<Var> {
    let squares: Vec<Var> = per_pair
        .iter()
        .map(|&j| {
            let h = tape.relu(j);
            tape.square(h)
        })
        .collect();
    let all = tape.concat(&squares)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, T::of(1.0 / (2.0 * per_pair.len() as f64))))
}

/// `log Σ exp(α − D)` over the given distance vectors, or `None` when empty.
fn lifted_log_term<T: Real>(
    tape: &mut Tape<T>,
    distances: &[Var],
    alpha: f64,
) -> Result<Option<Var>> {
    if distances.is_empty() {
        return Ok(None);
    }
    let all = tape.concat(distances)?;
    let neg = tape.scale(all, -T::one());
    let shifted = tape.add_scalar(neg, T::of(alpha));
    Ok(Some(tape.logsumexp(shifted)))
}

/// Continuous lifted structured loss over the mined pairs.
///
/// `features[i]` must all share one `w × d` (or `h × w × d`) shape and
/// `rotations[i]` is the rotation bin of sample `i`. Negative and
/// pseudo-negative terms sum over every rolled branch; the positive term
/// weights the branches with a Gaussian centered at the ground-truth
/// relative rotation.
pub fn continuous_lifted_loss<T: Real>(
    tape: &mut Tape<T>,
    pairs: &PairSets,
    features: &[Var],
    rotations: &[usize],
    alpha: f64,
    sigma: f64,
) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!(
            "margin alpha must be positive, got {alpha}"
        )));
    }
    if rotations.len() != features.len() {
        return Err(Error::invalid("one rotation label per feature is required"));
    }
    check_pairs(pairs, features.len())?;
    let shape = tape.value(features[0]).shape().to_vec();
    if let Some(bad) = features.iter().find(|&&f| tape.value(f).shape() != shape) {
        return Err(Error::ShapeMismatch {
            op: "continuous_lifted_loss",
            expected: shape,
            got: tape.value(*bad).shape().to_vec(),
        });
    }
    let w = shape[shape.len() - 2];

    // rolling distances of shift_k(z_a) against z_b, keyed by (a, b)
    let mut rolled: HashMap<(usize, usize), Var> = HashMap::new();
    let mut rolling = |tape: &mut Tape<T>, a: usize, b: usize| -> Result<Var> {
        if let Some(&v) = rolled.get(&(a, b)) {
            return Ok(v);
        }
        let v = tape.rolling_l2(features[a], features[b])?;
        rolled.insert((a, b), v);
        Ok(v)
    };

    let mut per_pair = Vec::with_capacity(pairs.positives.len());
    for (&(i, j), pn) in pairs.positives.iter().zip(&pairs.pseudo_negatives) {
        let mut away = Vec::new();
        for (anchor, extra) in [(i, &pn.of_i), (j, &pn.of_j)] {
            for k in pairs
                .negatives_of(anchor)
                .into_iter()
                .chain(extra.iter().copied())
            {
                // both orientations hold the same multiset of branch distances
                away.push(rolling(tape, anchor.min(k), anchor.max(k))?);
            }
        }
        let mask =
            gaussian_rotation_mask(relative_rotation(rotations[i], rotations[j], w), w, sigma)?;
        let r_ij = rolling(tape, i, j)?;
        let positive = tape.dot_const(r_ij, mask.into_iter().map(T::of).collect())?;
        let j_ij = match lifted_log_term(tape, &away, alpha)? {
            Some(log_term) => tape.add(log_term, positive)?,
            None => {
                log::warn!("positive pair ({i}, {j}) has no negative or pseudo-negative partner");
                positive
            }
        };
        per_pair.push(j_ij);
    }
    hinge_square_mean(tape, &per_pair)
}

/// Original lifted structured loss on unshifted feature distances, using the
/// negative set only.
pub fn original_lifted_loss<T: Real>(
    tape: &mut Tape<T>,
    pairs: &PairSets,
    features: &[Var],
    alpha: f64,
) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!(
            "margin alpha must be positive, got {alpha}"
        )));
    }
    check_pairs(pairs, features.len())?;
    let mut dist: HashMap<(usize, usize), Var> = HashMap::new();
    let mut distance = |tape: &mut Tape<T>, a: usize, b: usize| -> Result<Var> {
        let key = (a.min(b), a.max(b));
        if let Some(&v) = dist.get(&key) {
            return Ok(v);
        }
        let v = tape.l2_distance(features[key.0], features[key.1])?;
        dist.insert(key, v);
        Ok(v)
    };
    let mut per_pair = Vec::with_capacity(pairs.positives.len());
    for &(i, j) in &pairs.positives {
        let mut away = Vec::new();
        for anchor in [i, j] {
            for k in pairs.negatives_of(anchor) {
                away.push(distance(tape, anchor, k)?);
            }
        }
        let d_ij = distance(tape, i, j)?;
        let j_ij = match lifted_log_term(tape, &away, alpha)? {
            Some(log_term) => tape.add(log_term, d_ij)?,
            None => {
                log::warn!("positive pair ({i}, {j}) has no negative partner");
                d_ij
            }
        };
        per_pair.push(j_ij);
    }
    hinge_square_mean(tape, &per_pair)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Several rooms, at least three samples each.
    Rooms,
    /// Pairs of samples drawn from the same exemplar group.
    Places,
}

/// Picks `batch_size` sample indices.
///
/// In [`BatchMode::Rooms`] at least two rooms are represented with at least
/// three samples each whenever the dataset allows it.
pub fn batch_builder<R: Rng>(
    labels: &[SampleLabel],
    batch_size: usize,
    mode: BatchMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if batch_size < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    let group_of = |l: &SampleLabel| match mode {
        BatchMode::Rooms => l.room,
        BatchMode::Places => l.place,
    };
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let g = group_of(l);
        match groups.iter_mut().find(|(key, _)| *key == g) {
            Some((_, members)) => members.push(i),
            None => groups.push((g, vec![i])),
        }
    }
    let per_group = match mode {
        BatchMode::Rooms => 3,
        BatchMode::Places => 2,
    };
    let mut eligible: Vec<&(usize, Vec<usize>)> =
        groups.iter().filter(|(_, m)| m.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    eligible.shuffle(rng);
    let n_groups = (batch_size / per_group)
        .clamp(2, eligible.len().max(1))
        .min(eligible.len());
    let chosen = &eligible[..n_groups];

    let mut batch = Vec::with_capacity(batch_size);
    let mut pools: Vec<Vec<usize>> = chosen
        .iter()
        .map(|(_, members)| {
            let mut m = members.clone();
            m.shuffle(rng);
            m
        })
        .collect();
    // round-robin so the groups are as even as possible
    let mut progress = true;
    while batch.len() < batch_size && progress {
        progress = false;
        for pool in pools.iter_mut() {
            if batch.len() == batch_size {
                break;
            }
            if let Some(i) = pool.pop() {
                batch.push(i);
                progress = true;
            }
        }
    }
    // small datasets: top up from anywhere
    if batch.len() < batch_size {
        let mut rest: Vec<usize> = (0..labels.len()).filter(|i| !batch.contains(i)).collect();
        rest.shuffle(rng);
        batch.extend(rest.into_iter().take(batch_size - batch.len()));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::omni::shift_columns;
    use crate::tensor::{finite_diff_check, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label(room: usize, x: f64, y: f64) -> SampleLabel {
        SampleLabel {
            room,
            place: room,
            position: [x, y],
            rotation: 0,
        }
    }

    #[test]
    fn mining_two_rooms() {
        let batch = [label(0, 0., 0.), label(0, 1., 0.), label(1, 5., 5.)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = mine_pairs(&batch, &MiningConfig::default(), &mut rng).unwrap();
        assert_eq!(pairs.negatives, vec![(0, 2), (1, 2)]);
        assert_eq!(pairs.positives, vec![(0, 1)]);
        assert_eq!(pairs.pseudo_negatives, vec![PseudoNegatives::default()]);
    }

    #[test]
    fn mining_pseudo_negatives() {
        // d01 = 1 < d02 = 2 < d12 = 3
        let batch = [label(0, 0., 0.), label(0, 1., 0.), label(0, -2., 0.)];
        let pairs = PairSets {
            positives: vec![(0, 1)],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mined = mine_pairs(&batch, &MiningConfig::default(), &mut rng).unwrap();
        let at = mined
            .positives
            .iter()
            .position(|&p| p == pairs.positives[0])
            .unwrap();
        assert_eq!(mined.pseudo_negatives[at].of_i, vec![2]);
        assert_eq!(mined.pseudo_negatives[at].of_j, vec![2]);
        assert!(mined.negatives.is_empty());
    }

    #[test]
    fn mining_requires_a_positive() {
        let batch = [label(0, 0., 0.), label(1, 1., 0.)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            mine_pairs(&batch, &MiningConfig::default(), &mut rng),
            Err(Error::NoPositivePairs)
        ));
    }

    #[test]
    fn original_loss_closed_form() {
        // positive pair at distance 0, one negative per endpoint at alpha + 10
        let alpha = 1.0;
        let feats = [
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![11.0]).unwrap(),
        ];
        let pairs = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![(0, 2), (1, 2)],
            pseudo_negatives: vec![PseudoNegatives::default()],
        };
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = feats.iter().map(|f| tape.leaf(f.clone())).collect();
        let j = original_lifted_loss(&mut tape, &pairs, &vars, alpha).unwrap();
        assert_eq!(tape.value(j).item(), 0.0);
        // the pre-hinge value: log(2 e^-10)
        let pre = (2.0f64 * (-10.0f64).exp()).ln();
        assert!((pre + 9.307).abs() < 1e-3);

        // same setup at a smaller negative distance gives a positive loss
        let mut tape = Tape::<f64>::new();
        let mut near = feats.clone();
        near[2] = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let vars: Vec<Var> = near.iter().map(|f| tape.leaf(f.clone())).collect();
        let j = original_lifted_loss(&mut tape, &pairs, &vars, alpha).unwrap();
        let expect = (2.0f64 * 0.5f64.exp()).ln().max(0.0).powi(2) / 2.0;
        assert!((tape.value(j).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn original_loss_is_scale_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::from_fn(&[2, 2], |_| rng.gen_range(-0.5..0.5)))
            .collect();
        let pairs = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![(0, 2), (1, 3)],
            pseudo_negatives: vec![PseudoNegatives::default()],
        };
        let eval = |scale: f64| {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = feats
                .iter()
                .map(|f| {
                    tape.leaf(
                        Tensor::new(
                            f.shape().to_vec(),
                            f.data().iter().map(|v| v * scale).collect(),
                        )
                        .unwrap(),
                    )
                })
                .collect();
            let j = original_lifted_loss(&mut tape, &pairs, &vars, 1.0).unwrap();
            tape.value(j).item()
        };
        assert!((eval(1.0) - eval(3.0)).abs() > 1e-6);
    }

    #[test]
    fn hinge_floor_with_far_negatives() {
        let z = Tensor::new(vec![2, 1], vec![0.3, -0.2]).unwrap();
        let far = Tensor::new(vec![2, 1], vec![1e3, 1e3]).unwrap();
        let pairs = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![(0, 2), (1, 2)],
            pseudo_negatives: vec![PseudoNegatives::default()],
        };
        let mut tape = Tape::<f64>::new();
        let vars = vec![tape.leaf(z.clone()), tape.leaf(z), tape.leaf(far)];
        let j = continuous_lifted_loss(&mut tape, &pairs, &vars, &[0, 0, 0], 1.0, 1.0).unwrap();
        assert_eq!(tape.value(j).item(), 0.0);
    }

    #[test]
    fn positive_term_uses_ground_truth_rotation() {
        // z1 is z0 shifted by two bins; with a one-hot mask at the ground
        // truth the positive term vanishes
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = Tensor::<f64>::from_fn(&[4, 2], |_| rng.gen_range(-1.0..1.0));
        let z1 = shift_columns(&z0, 2).unwrap();
        let pairs = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![],
            pseudo_negatives: vec![PseudoNegatives::default()],
        };
        let mut tape = Tape::<f64>::new();
        let vars = vec![tape.leaf(z0.clone()), tape.leaf(z1.clone())];
        let j = continuous_lifted_loss(&mut tape, &pairs, &vars, &[1, 3], 1.0, 0.0).unwrap();
        assert_eq!(tape.value(j).item(), 0.0);
        let mut tape = Tape::<f64>::new();
        let vars = vec![tape.leaf(z0), tape.leaf(z1)];
        let j = continuous_lifted_loss(&mut tape, &pairs, &vars, &[1, 2], 1.0, 0.0).unwrap();
        assert!(tape.value(j).item() > 0.0);
    }

    #[test]
    fn loss_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 1]));
        let b = tape.leaf(Tensor::zeros(&[3, 1]));
        let empty = PairSets::default();
        assert!(matches!(
            continuous_lifted_loss(&mut tape, &empty, &[a, b], &[0, 0], 1.0, 1.0),
            Err(Error::NoPositivePairs)
        ));
        let pairs = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![],
            pseudo_negatives: vec![PseudoNegatives::default()],
        };
        assert!(continuous_lifted_loss(&mut tape, &pairs, &[a, b], &[0, 0], 1.0, 1.0).is_err());
        assert!(continuous_lifted_loss(&mut tape, &pairs, &[a, a], &[0, 0], 0.0, 1.0).is_err());
        assert!(original_lifted_loss(&mut tape, &empty, &[a, a], 1.0).is_err());
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, rooms: usize) -> Vec<SampleLabel> {
        (0..n)
            .map(|i| SampleLabel {
                room: i % rooms,
                place: i % (rooms * 2),
                position: [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)],
                rotation: rng.gen_range(0..4),
            })
            .collect()
    }

    #[test]
    fn continuous_loss_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let batch = random_batch(&mut rng, 6, 2);
            let pairs = mine_pairs(&batch, &MiningConfig::default(), &mut rng).unwrap();
            let rotations: Vec<usize> = batch.iter().map(|l| l.rotation).collect();
            let flat = Tensor::<f64>::from_fn(&[6 * 4 * 3], |_| rng.gen_range(-0.6..0.6));
            let err = finite_diff_check(
                |tape, x| {
                    let vars: Vec<Var> = (0..6)
                        .map(|s| {
                            let idx = (s * 12..(s + 1) * 12).map(Some).collect();
                            tape.gather(x, idx, &[4, 3])
                        })
                        .collect::<Result<_>>()?;
                    continuous_lifted_loss(tape, &pairs, &vars, &rotations, 1.0, 1.0)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn batch_builder_rooms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = random_batch(&mut rng, 60, 3);
        let batch = batch_builder(&labels, 8, BatchMode::Rooms, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        let mut counts = HashMap::new();
        for &i in &batch {
            *counts.entry(labels[i].room).or_insert(0) += 1;
        }
        assert!(counts.len() >= 2);
        assert!(counts.values().all(|&c| c >= 3));

        let again = batch_builder(
            &labels,
            8,
            BatchMode::Rooms,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let same = batch_builder(
            &labels,
            8,
            BatchMode::Rooms,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(again, same);
    }

    #[test]
    fn batch_builder_places() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = random_batch(&mut rng, 60, 3);
        let batch = batch_builder(&labels, 8, BatchMode::Places, &mut rng).unwrap();
        let sub: Vec<SampleLabel> = batch.iter().map(|&i| labels[i]).collect();
        assert!(mine_class_pairs(&sub, &MiningConfig::default(), &mut rng).is_ok());
    }

    /// Exhaustive enumeration of the set definitions.
    fn brute_force_sets(
        batch: &[SampleLabel],
        positives: &[(usize, usize)],
    ) -> (Vec<(usize, usize)>, Vec<PseudoNegatives>) {
        let n = batch.len();
        let mut negatives = Vec::new();
        for i in 0..n {
            for k in 0..n {
                if i < k && batch[i].room != batch[k].room {
                    negatives.push((i, k));
                }
            }
        }
        let mut pns = Vec::new();
        for &(i, j) in positives {
            let dij = ((batch[i].position[0] - batch[j].position[0]).powi(2)
                + (batch[i].position[1] - batch[j].position[1]).powi(2))
            .sqrt();
            let mut pn = PseudoNegatives::default();
            for k in 0..n {
                for (anchor, other, out) in [(i, j, &mut pn.of_i), (j, i, &mut pn.of_j)] {
                    let d = ((batch[anchor].position[0] - batch[k].position[0]).powi(2)
                        + (batch[anchor].position[1] - batch[k].position[1]).powi(2))
                    .sqrt();
                    if k != anchor && k != other && batch[k].room == batch[anchor].room && d >= dij
                    {
                        out.push(k);
                    }
                }
            }
            pns.push(pn);
        }
        (negatives, pns)
    }

    proptest! {
        #[test]
        fn mined_sets_match_enumeration(seed in any::<u64>(), n in 2usize..12, rooms in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut batch = random_batch(&mut rng, n, rooms);
            batch[1].room = batch[0].room;
            let pairs = mine_pairs(&batch, &MiningConfig::default(), &mut rng).unwrap();
            let (negatives, pns) = brute_force_sets(&batch, &pairs.positives);
            prop_assert_eq!(&pairs.negatives, &negatives);
            prop_assert_eq!(&pairs.pseudo_negatives, &pns);
            for &(i, j) in &pairs.positives {
                prop_assert!(i < j && batch[i].room == batch[j].room);
            }
        }

        #[test]
        fn continuous_loss_is_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, 6, 2);
            let pairs = mine_pairs(&batch, &MiningConfig::default(), &mut rng).unwrap();
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = (0..6)
                .map(|_| tape.leaf(Tensor::from_fn(&[4, 2], |_| rng.gen_range(-2.0..2.0))))
                .collect();
            let rot: Vec<usize> = batch.iter().map(|l| l.rotation).collect();
            let j = continuous_lifted_loss(&mut tape, &pairs, &vars, &rot, 1.0, 1.0).unwrap();
            prop_assert!(tape.value(j).item() >= 0.0);
        }
    }
}
