//! A synthetic interaction world with known item topics.
//!
//! Items carry a latent topic, a genre and a popularity weight. Users like a
//! few topics and pick items by topic affinity and popularity. Semantic rows
//! are drawn around the same topic centers with genre-dependent noise, so
//! noisier genres start with less informative representations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::dataio::Interaction;
use crate::embed::{embed_from_topics, topic_centers, SemanticMatrix};
use crate::seeds::{self, Role};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_genres: usize,
    pub num_latent_topics: usize,
    /// Topics each user likes.
    pub topics_per_user: usize,
    pub d_sem: usize,
    /// Embedding noise per genre.
    pub genre_noise_scale: Vec<f64>,
    /// Interactions per user, drawn uniformly from this inclusive range.
    pub interactions_per_user: [usize; 2],
    /// Zipf exponent of item popularity.
    pub popularity_exponent: f64,
    /// Log-odds bonus of items on a liked topic.
    pub affinity: f64,
    /// Share of interactions that get a low (filtered) rating.
    pub low_rating_share: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_items: 600,
            num_genres: 4,
            num_latent_topics: 12,
            topics_per_user: 2,
            d_sem: 32,
            genre_noise_scale: vec![0.05, 0.2, 0.4, 0.6],
            interactions_per_user: [25, 50],
            popularity_exponent: 0.8,
            affinity: 3.0,
            low_rating_share: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items < 2 || self.num_genres == 0 || self.num_latent_topics == 0 {
            return Err(Error::Config("world needs users, at least 2 items, genres and topics".into()));
        }
        if self.d_sem == 0 {
            return Err(Error::Config("d_sem must be >= 1".into()));
        }
        if self.topics_per_user == 0 || self.topics_per_user > self.num_latent_topics {
            return Err(Error::Config("topics_per_user must lie in 1..=num_latent_topics".into()));
        }
        if self.genre_noise_scale.len() != self.num_genres {
            return Err(Error::Config(format!(
                "genre_noise_scale has {} entries for {} genres",
                self.genre_noise_scale.len(),
                self.num_genres
            )));
        }
        if self.genre_noise_scale.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("genre_noise_scale entries must be finite and >= 0".into()));
        }
        let [lo, hi] = self.interactions_per_user;
        if lo == 0 || lo > hi || hi > self.num_items {
            return Err(Error::Config("interactions_per_user must be a range within 1..=num_items".into()));
        }
        if !(0.0..1.0).contains(&self.low_rating_share) {
            return Err(Error::Config("low_rating_share must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub interactions: Vec<Interaction>,
    pub item_keys: Vec<String>,
    pub genre_labels: Vec<String>,
    pub genre_of: Vec<usize>,
    pub topic_of: Vec<usize>,
    /// One row per item, in `item_keys` order.
    pub embeddings: SemanticMatrix,
}

pub fn generate(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = seeds::rng(cfg.seed, Role::World);
    let n = cfg.num_items;
    let topic_of: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_latent_topics)).collect();
    // Genres in equal shares, shuffled over items.
    let mut genre_of: Vec<usize> = (0..n).map(|i| i % cfg.num_genres).collect();
    genre_of.shuffle(&mut rng);
    let mut rank: Vec<usize> = (0..n).collect();
    rank.shuffle(&mut rng);
    let popularity: Vec<f64> = rank
        .iter()
        .map(|&r| (r as f64 + 1.0).powf(-cfg.popularity_exponent))
        .collect();

    let mut interactions = Vec::new();
    let mut time = 0i64;
    for u in 0..cfg.num_users {
        let mut topics: Vec<usize> = (0..cfg.num_latent_topics).collect();
        topics.shuffle(&mut rng);
        topics.truncate(cfg.topics_per_user);
        let mut weights: Vec<f64> = (0..n)
            .map(|i| popularity[i] * if topics.contains(&topic_of[i]) { cfg.affinity.exp() } else { 1.0 })
            .collect();
        let count = rng.random_range(cfg.interactions_per_user[0]..=cfg.interactions_per_user[1]);
        for _ in 0..count {
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
            let i = dist.sample(&mut rng);
            weights[i] = 0.0;
            let rating = if rng.random::<f64>() < cfg.low_rating_share {
                rng.random_range(1..=2) as f64
            } else {
                rng.random_range(3..=5) as f64
            };
            time += 1;
            interactions.push(Interaction {
                user: (u + 1).to_string(),
                item: (i + 1).to_string(),
                rating,
                timestamp: Some(time),
            });
        }
    }

    let mut embed_rng = seeds::rng(cfg.seed, Role::Embed);
    let centers = topic_centers(cfg.num_latent_topics, cfg.d_sem, &mut embed_rng);
    let noise_of: Vec<f64> = genre_of.iter().map(|&g| cfg.genre_noise_scale[g]).collect();
    let embeddings = embed_from_topics(&centers, &topic_of, &noise_of, &mut embed_rng)?;
    Ok(World {
        interactions,
        item_keys: (1..=n).map(|i| i.to_string()).collect(),
        genre_labels: (0..cfg.num_genres).map(|g| format!("genre{g}")).collect(),
        genre_of,
        topic_of,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            num_users: 20,
            num_items: 40,
            interactions_per_user: [5, 8],
            d_sem: 8,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.embeddings.num_items(), 40);
    }

    #[test]
    fn users_never_repeat_items() {
        let w = generate(&small()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for r in &w.interactions {
            assert!(seen.insert((r.user.clone(), r.item.clone())));
        }
    }

    #[test]
    fn rejects_bad_noise_length() {
        let cfg = WorldConfig {
            genre_noise_scale: vec![0.1],
            ..small()
        };
        assert!(generate(&cfg).is_err());
    }
}
