//! Keypoint-to-conversation grouping strategies.
//!
//! Fixed-round grouping partitions a category's keypoints into groups of
//! exactly `k`, repeating the image until every keypoint is included; a short
//! final group is padded by cycling keypoints from earlier groups so shapes
//! stay uniform. Dynamic-round grouping draws each conversation's size
//! uniformly from a range. The subset strategy pairs an image with a single
//! random keypoint subset and makes no coverage guarantee.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Groups of exactly `k` (except a lone short group when the pool itself is
/// smaller than `k`), covering every keypoint at least once. The number of
/// groups is `ceil(len / k)`.
pub fn fixed_round_pairing<T: Clone>(
    keypoints: &[T],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<T>>> {
    if keypoints.is_empty() {
        return Err(Error::Config("no keypoints to pair".into()));
    }
    if k == 0 {
        return Err(Error::Config("round size k must be at least 1".into()));
    }
    let mut shuffled: Vec<T> = keypoints.to_vec();
    shuffled.shuffle(rng);
    let mut groups: Vec<Vec<T>> = shuffled.chunks(k).map(|c| c.to_vec()).collect();
    let last = groups.len() - 1;
    let last_len = groups[last].len();
    if last_len < k && groups.len() > 1 {
        // Pad by cycling keypoints that already appear in earlier groups.
        let prior = shuffled.len() - last_len;
        for i in 0..k - last_len {
            groups[last].push(shuffled[i % prior].clone());
        }
    }
    Ok(groups)
}

/// Groups with sizes drawn uniformly from `range` (clamped to the pool
/// size), covering every keypoint at least once.
pub fn dynamic_round_pairing<T: Clone>(
    keypoints: &[T],
    range: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<T>>> {
    if keypoints.is_empty() {
        return Err(Error::Config("no keypoints to pair".into()));
    }
    let (lo, hi) = range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "invalid round range [{lo}, {hi}]"
        )));
    }
    let lo = lo.min(keypoints.len());
    let hi = hi.min(keypoints.len());
    let mut shuffled: Vec<T> = keypoints.to_vec();
    shuffled.shuffle(rng);

    let mut groups: Vec<Vec<T>> = Vec::new();
    let mut pos = 0;
    while pos < shuffled.len() {
        let size = rng.gen_range(lo..=hi);
        let take = size.min(shuffled.len() - pos);
        let prior = pos;
        let mut group: Vec<T> = shuffled[pos..pos + take].to_vec();
        pos += take;
        if take < size && prior > 0 {
            for i in 0..size - take {
                group.push(shuffled[i % prior].clone());
            }
        }
        groups.push(group);
    }
    Ok(groups)
}

/// One group of `min(k, len)` randomly chosen keypoints; keypoints outside
/// the subset are simply not trained on for this image.
pub fn subset_pairing<T: Clone>(
    keypoints: &[T],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<T>>> {
    if keypoints.is_empty() {
        return Err(Error::Config("no keypoints to pair".into()));
    }
    if k == 0 {
        return Err(Error::Config("round size k must be at least 1".into()));
    }
    let mut shuffled: Vec<T> = keypoints.to_vec();
    shuffled.shuffle(rng);
    shuffled.truncate(k.min(keypoints.len()));
    Ok(vec![shuffled])
}
