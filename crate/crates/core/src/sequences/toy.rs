//! Synthetic stand-in for image embeddings.
//!
//! Every environment has a style centre in class space and a separate cue
//! anchor. A fresh class vector is its environment's centre plus spread
//! noise, so features carry an environment signature; with probability
//! `ambiguity` a new class instead copies the vector of an unpaired class
//! from another environment, making the two indistinguishable without
//! context. Observed features add isotropic noise and, with the spatial cue
//! on, a noisy copy of the environment's cue anchor.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{SamplerConfig, Skeleton};
use crate::rng::StreamRng;
use crate::Real;

fn gaussian(rng: &mut StreamRng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Class vectors (indexed by class id) for a skeleton, plus cue anchors.
pub(crate) fn class_vectors(
    skeleton: &Skeleton,
    config: &SamplerConfig,
    rng: &mut StreamRng,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n_env = skeleton.rosters.len();
    let centres: Vec<Vec<f64>> = (0..n_env)
        .map(|_| gaussian(rng, config.feature_dim, config.style_scale))
        .collect();
    let anchors: Vec<Vec<f64>> = (0..n_env)
        .map(|_| gaussian(rng, config.cue_dim, 1.0))
        .collect();
    let n_classes = skeleton.rosters.iter().map(Vec::len).sum::<usize>();
    let mut home = vec![0usize; n_classes];
    for (e, roster) in skeleton.rosters.iter().enumerate() {
        for &c in roster {
            home[c as usize] = e;
        }
    }
    // Classes are numbered in order of creation.
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut paired = vec![false; n_classes];
    for c in 0..n_classes {
        let candidates: Vec<usize> = (0..c)
            .filter(|&o| !paired[o] && home[o] != home[c])
            .collect();
        let share = rng.random_bool(config.ambiguity) && !candidates.is_empty();
        if share {
            let partner = candidates[rng.random_range(0..candidates.len())];
            paired[partner] = true;
            paired[c] = true;
            vectors.push(vectors[partner].clone());
        } else {
            let v = gaussian(rng, config.feature_dim, config.class_spread)
                .iter()
                .zip(&centres[home[c]])
                .map(|(z, m)| z + m)
                .collect();
            vectors.push(v);
        }
    }
    (vectors, anchors)
}

/// One feature vector per step of `skeleton`.
pub fn generate_toy_features(
    skeleton: &Skeleton,
    config: &SamplerConfig,
    rng: &mut StreamRng,
) -> Vec<Vec<Real>> {
    let (vectors, anchors) = class_vectors(skeleton, config, rng);
    skeleton
        .classes
        .iter()
        .zip(&skeleton.envs)
        .map(|(&c, &e)| {
            let mut x: Vec<Real> = vectors[c as usize]
                .iter()
                .zip(gaussian(rng, config.feature_dim, config.feature_noise))
                .map(|(v, n)| (v + n) as Real)
                .collect();
            if config.spatial_cue {
                x.extend(
                    anchors[e as usize]
                        .iter()
                        .zip(gaussian(rng, config.cue_dim, config.cue_noise))
                        .map(|(a, n)| (a + n) as Real),
                );
            }
            x
        })
        .collect()
}
