//! A seeded synthetic movie world for offline end-to-end runs.
//!
//! Items belong to latent clusters that share genres, directors, cast and
//! plot vocabulary. Each user has a home cluster plus a favourite director
//! and actor; conversations and interaction logs are drawn from the same
//! per-user affinity, and the seeker's turns state those preferences in
//! text, which is what the mock generator reads.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::MovieEntry;
use crate::datasets::{Conversation, Interaction, Role, Turn};
use crate::error::{RarError, Result};
use crate::seed::{Rng, SeedStream, WORLD};

const GENRES: &[&str] = &[
    "action", "adventure", "animation", "comedy", "crime", "documentary", "drama", "family", "fantasy", "history",
    "horror", "music", "mystery", "romance", "science fiction", "thriller", "war", "western",
];
const ONSETS: &[&str] = &[
    "b", "br", "c", "d", "dr", "f", "g", "gr", "h", "j", "k", "l", "m", "n", "p", "r", "s", "st", "t", "tr", "v", "w", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "s", "th", "x", "nd", "m"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_clusters: usize,
    pub n_users: usize,
    pub n_conversations: usize,
    /// Recommender turns per conversation.
    pub rec_turns: usize,
    pub sessions_per_user: usize,
    pub session_len: (usize, usize),
    /// Softmax temperature of the user-item affinity.
    pub affinity_temperature: f64,
    /// Weight of director, actor and genre taste in browsing sessions;
    /// conversations always use 1.
    pub session_taste: f64,
    /// Set from the run's root seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_items: 1000,
            n_clusters: 20,
            n_users: 300,
            n_conversations: 1250,
            rec_turns: 2,
            sessions_per_user: 3,
            session_len: (6, 10),
            affinity_temperature: 0.6,
            session_taste: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: String,
    pub cluster: usize,
    pub genre: String,
    pub director: String,
    pub actor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub items: Vec<MovieEntry>,
    pub item_cluster: Vec<usize>,
    pub users: Vec<UserProfile>,
    /// Conversations with raw title mentions; items are left for linking.
    pub conversations: Vec<Conversation>,
    pub interactions: Vec<Interaction>,
}

struct Cluster {
    genres: Vec<String>,
    directors: Vec<String>,
    cast: Vec<String>,
    vocab: Vec<String>,
}

fn syllable(rng: &mut Rng) -> String {
    format!(
        "{}{}{}",
        ONSETS.choose(rng).expect("non-empty"),
        VOWELS.choose(rng).expect("non-empty"),
        CODAS.choose(rng).expect("non-empty")
    )
}

fn word(rng: &mut Rng, syllables: usize) -> String {
    (0..syllables).map(|_| syllable(rng)).collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn person(rng: &mut Rng, used: &mut HashSet<String>) -> String {
    loop {
        let name = format!("{} {}", capitalize(&word(rng, 2)), capitalize(&word(rng, 2)));
        if used.insert(name.clone()) {
            return name;
        }
    }
}

fn mention(e: &MovieEntry) -> String {
    match e.year {
        Some(y) => format!("{} ({y})", e.title),
        None => e.title.clone(),
    }
}

impl World {
    fn affinity(&self, user: &UserProfile, item: usize, taste: f64) -> f64 {
        let e = &self.items[item];
        let mut a = 0.0;
        if e.director.contains(&user.director) {
            a += 1.0;
        }
        if e.cast.contains(&user.actor) {
            a += 1.0;
        }
        if e.genre.contains(&user.genre) {
            a += 0.5;
        }
        let home = if self.item_cluster[item] == user.cluster { 2.0 } else { 0.0 };
        home + taste * a
    }

    /// Draws `n` distinct items from the user's affinity softmax, skipping `seen`.
    fn draw_items(&self, user: &UserProfile, n: usize, seen: &HashSet<usize>, taste: f64, temperature: f64, rng: &mut Rng) -> Vec<usize> {
        // Gumbel-top-n over affinity / temperature
        let mut keyed: Vec<(f64, usize)> = (0..self.items.len())
            .filter(|i| !seen.contains(i))
            .map(|i| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                (self.affinity(user, i, taste) / temperature - (-u.ln()).ln(), i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().take(n).map(|(_, i)| i).collect()
    }
}

/// Builds the world for `cfg`; identical configs give identical worlds.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    if cfg.n_clusters == 0 || cfg.n_items < cfg.n_clusters * 8 {
        return Err(RarError::invalid("need at least eight items per cluster"));
    }
    if cfg.n_users == 0 || cfg.rec_turns == 0 || cfg.session_len.0 < 2 || cfg.session_len.1 < cfg.session_len.0 {
        return Err(RarError::invalid("world needs users, recommender turns and sessions of two or more items"));
    }
    let root = SeedStream::new(cfg.seed).stream(WORLD);
    let mut rng = root.stream("names").rng();
    let mut people = HashSet::new();

    let clusters: Vec<Cluster> = (0..cfg.n_clusters)
        .map(|_| {
            let mut g: Vec<String> = GENRES.choose_multiple(&mut rng, 2).map(|s| s.to_string()).collect();
            g.sort();
            Cluster {
                genres: g,
                directors: (0..3).map(|_| person(&mut rng, &mut people)).collect(),
                cast: (0..8).map(|_| person(&mut rng, &mut people)).collect(),
                vocab: (0..12).map(|_| word(&mut rng, 2)).collect(),
            }
        })
        .collect();
    let shared_vocab: Vec<String> = (0..60).map(|_| word(&mut rng, 2)).collect();

    let mut rng = root.stream("items").rng();
    let mut titles = HashSet::new();
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut item_cluster = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let c = i % cfg.n_clusters;
        let cl = &clusters[c];
        let title = loop {
            let n = rng.random_range(1..=3);
            let t = (0..n)
                .map(|_| {
                    let syl = rng.random_range(1..=3);
                    capitalize(&word(&mut rng, syl))
                })
                .collect::<Vec<_>>()
                .join(" ");
            let t = if rng.random_bool(0.3) { format!("The {t}") } else { t };
            if titles.insert(t.to_lowercase()) {
                break t;
            }
        };
        let mut genre = vec![cl.genres[0].clone()];
        if rng.random_bool(0.6) {
            genre.push(cl.genres[1].clone());
        }
        let mut plot: Vec<String> = cl.vocab.choose_multiple(&mut rng, 6).cloned().collect();
        plot.extend(shared_vocab.choose_multiple(&mut rng, 4).cloned());
        plot.shuffle(&mut rng);
        items.push(MovieEntry {
            id: format!("m{:04}", i + 1),
            title,
            year: Some(rng.random_range(1950..=2023)),
            genre,
            director: vec![cl.directors.choose(&mut rng).expect("directors").clone()],
            cast: cl.cast.choose_multiple(&mut rng, 3).cloned().collect(),
            plot: capitalize(&plot.join(" ")) + ".",
        });
        item_cluster.push(c);
    }

    let mut rng = root.stream("users").rng();
    let users: Vec<UserProfile> = (0..cfg.n_users)
        .map(|u| {
            let c = rng.random_range(0..cfg.n_clusters);
            let cl = &clusters[c];
            UserProfile {
                id: format!("u{:04}", u + 1),
                cluster: c,
                genre: cl.genres.choose(&mut rng).expect("genres").clone(),
                director: cl.directors.choose(&mut rng).expect("directors").clone(),
                actor: cl.cast.choose(&mut rng).expect("cast").clone(),
            }
        })
        .collect();

    let mut world = World {
        items,
        item_cluster,
        users,
        conversations: Vec::new(),
        interactions: Vec::new(),
    };

    let tau = cfg.affinity_temperature;
    let mut rng = root.stream("conversations").rng();
    for n in 0..cfg.n_conversations {
        let user = world.users[rng.random_range(0..world.users.len())].clone();
        let mut seen = HashSet::new();
        let mut turns = Vec::new();
        for r in 0..cfg.rec_turns {
            let liked = world.draw_items(&user, 1, &seen, 1.0, tau, &mut rng)[0];
            seen.insert(liked);
            let liked_e = &world.items[liked];
            let text = if r == 0 {
                format!(
                    "Hi! I'm in the mood for a {} movie. I loved {} and I'm a big fan of {}.",
                    user.genre,
                    mention(liked_e),
                    user.actor
                )
            } else {
                format!(
                    "Thanks, that sounds good. I also really enjoyed {}. Anything else with {}, maybe directed by {}?",
                    mention(liked_e),
                    user.actor,
                    user.director
                )
            };
            turns.push(Turn {
                role: Role::Seeker,
                text,
                items: vec![],
                mentions: vec![mention(liked_e)],
            });
            let rec = world.draw_items(&user, 1, &seen, 1.0, tau, &mut rng)[0];
            seen.insert(rec);
            let rec_e = &world.items[rec];
            turns.push(Turn {
                role: Role::Recommender,
                text: format!("You might enjoy {}, directed by {}.", mention(rec_e), rec_e.director.join(" and ")),
                items: vec![],
                mentions: vec![mention(rec_e)],
            });
        }
        world.conversations.push(Conversation {
            id: format!("c{:05}", n + 1),
            turns,
            unresolved: vec![],
        });
    }

    let mut rng = root.stream("interactions").rng();
    let base: i64 = 1_600_000_000;
    let users = world.users.clone();
    for (u, user) in users.iter().enumerate() {
        let mut t = base + u as i64 * 86_400 * 30;
        for _ in 0..cfg.sessions_per_user {
            let len = rng.random_range(cfg.session_len.0..=cfg.session_len.1);
            for item in world.draw_items(user, len, &HashSet::new(), cfg.session_taste, tau, &mut rng) {
                world.interactions.push(Interaction {
                    user: user.id.clone(),
                    item: world.items[item].id.clone(),
                    timestamp: t,
                });
                t += rng.random_range(120..900);
            }
            t += 86_400;
        }
    }
    Ok(world)
}
