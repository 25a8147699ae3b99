//! Movie corpus: deduplicating ingestion, title normalization, mention linking.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::Conversation;
use crate::error::{RarError, Result};

pub const MIN_YEAR: i32 = 1888;
pub const MAX_YEAR: i32 = 2100;
/// Similarity at or above which a fuzzy title match is accepted.
pub const FUZZY_THRESHOLD: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MovieEntry {
    pub id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default)]
    pub genre: Vec<String>,
    #[serde(default)]
    pub director: Vec<String>,
    #[serde(default)]
    pub cast: Vec<String>,
    #[serde(default)]
    pub plot: String,
}

impl MovieEntry {
    /// Number of populated metadata fields, used to rank duplicate records.
    pub fn filled_fields(&self) -> usize {
        [
            !self.title.trim().is_empty(),
            self.year.is_some(),
            !self.genre.is_empty(),
            !self.director.is_empty(),
            !self.cast.is_empty(),
            !self.plot.trim().is_empty(),
        ]
        .iter()
        .filter(|b| **b)
        .count()
    }

    fn missing_essential(&self) -> Option<&'static str> {
        if self.director.is_empty() {
            Some("missing_director")
        } else if self.cast.is_empty() {
            Some("missing_cast")
        } else if self.genre.is_empty() {
            Some("missing_genre")
        } else if self.plot.trim().is_empty() {
            Some("missing_plot")
        } else {
            None
        }
    }

    fn fill_from(&mut self, other: &MovieEntry) {
        if self.year.is_none() {
            self.year = other.year;
        }
        if self.genre.is_empty() {
            self.genre = other.genre.clone();
        }
        if self.director.is_empty() {
            self.director = other.director.clone();
        }
        if self.cast.is_empty() {
            self.cast = other.cast.clone();
        }
        if self.plot.trim().is_empty() {
            self.plot = other.plot.clone();
        }
    }

    /// Canonical key-value text used both for embedding and for prompts.
    pub fn serialize_kv(&self) -> String {
        format!(
            "title: {}\nyear: {}\ngenre: {}\ndirector: {}\ncast: {}\nplot: {}",
            self.title,
            self.year.map(|y| y.to_string()).unwrap_or_default(),
            self.genre.join(", "),
            self.director.join(", "),
            self.cast.join(", "),
            self.plot
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    #[default]
    PreferMostFields,
    PreferFirst,
}

type TitleKey = (String, Option<i32>);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusIndex {
    entries: BTreeMap<String, MovieEntry>,
    title_index: HashMap<TitleKey, String>,
    by_title: HashMap<String, Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records_read: usize,
    pub merged_duplicates: usize,
    pub dropped: BTreeMap<String, usize>,
    pub size: usize,
}

impl CorpusIndex {
    /// Builds an index from entries that are already unique by id and by
    /// normalized (title, year).
    pub fn from_entries(entries: impl IntoIterator<Item = MovieEntry>) -> Result<Self> {
        let mut index = CorpusIndex::default();
        for e in entries {
            if e.id.is_empty() {
                return Err(RarError::invalid("entry with empty id"));
            }
            let key = (normalize_title(&e.title), e.year);
            if key.0.is_empty() {
                return Err(RarError::invalid(format!("entry {} has an empty title", e.id)));
            }
            if index.entries.contains_key(&e.id) {
                return Err(RarError::invalid(format!("duplicate id {}", e.id)));
            }
            if let Some(other) = index.title_index.get(&key) {
                return Err(RarError::invalid(format!(
                    "entries {} and {} share title and year",
                    other, e.id
                )));
            }
            index.title_index.insert(key.clone(), e.id.clone());
            index.by_title.entry(key.0).or_default().push(e.id.clone());
            index.entries.insert(e.id.clone(), e);
        }
        for ids in index.by_title.values_mut() {
            ids.sort();
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MovieEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    /// Entries in ascending id order.
    pub fn entries(&self) -> impl Iterator<Item = &MovieEntry> {
        self.entries.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn lookup_title(&self, title: &str, year: Option<i32>) -> Option<&str> {
        self.title_index
            .get(&(normalize_title(title), year))
            .map(String::as_str)
    }

    /// Resolves a free-text mention: exact normalized title (and year when the
    /// mention carries one), then the best fuzzy match at or above the
    /// threshold. Returns the id and the similarity of the match.
    pub fn resolve_mention(&self, mention: &str) -> Option<(String, f64)> {
        let norm = normalize_title(mention);
        if norm.is_empty() {
            return None;
        }
        if let Some(year) = trailing_year(mention) {
            if let Some(id) = self.title_index.get(&(norm.clone(), Some(year))) {
                return Some((id.clone(), 1.0));
            }
        }
        if let Some(ids) = self.by_title.get(&norm) {
            return Some((ids[0].clone(), 1.0));
        }
        let mut best: Option<(&str, f64)> = None;
        for (title, ids) in &self.by_title {
            let s = normalized_similarity(&norm, title);
            let better = match best {
                None => true,
                Some((bid, bs)) => s > bs || (s == bs && ids[0].as_str() < bid),
            };
            if better {
                best = Some((ids[0].as_str(), s));
            }
        }
        best.filter(|(_, s)| *s >= FUZZY_THRESHOLD)
            .map(|(id, s)| (id.to_string(), s))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| RarError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in self.entries() {
            let line = serde_json::to_string(e).expect("entry serializes");
            writeln!(w, "{line}").map_err(|e| RarError::io(path, e))?;
        }
        w.flush().map_err(|e| RarError::io(path, e))
    }

    /// Loads an already-curated corpus file (no merging or dropping).
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let records = read_records(path)?;
        CorpusIndex::from_entries(records)
    }
}

fn read_records(path: &Path) -> Result<Vec<MovieEntry>> {
    let file = File::open(path).map_err(|e| RarError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RarError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MovieEntry = serde_json::from_str(&line).map_err(|e| RarError::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Reads JSONL sources, merges duplicate records and drops entries without
/// complete metadata.
pub fn ingest_sources(paths: &[PathBuf], policy: ConflictPolicy) -> Result<(CorpusIndex, IngestReport)> {
    let mut report = IngestReport::default();
    let mut records = Vec::new();
    for p in paths {
        let mut recs = read_records(p)?;
        report.records_read += recs.len();
        records.append(&mut recs);
    }

    let mut kept: Vec<MovieEntry> = Vec::with_capacity(records.len());
    for mut r in records {
        r.id = r.id.trim().to_string();
        r.title = r.title.split_whitespace().collect::<Vec<_>>().join(" ");
        if r.id.is_empty() {
            *report.dropped.entry("missing_id".into()).or_default() += 1;
        } else if normalize_title(&r.title).is_empty() {
            *report.dropped.entry("missing_title".into()).or_default() += 1;
        } else if r.year.is_some_and(|y| !(MIN_YEAR..=MAX_YEAR).contains(&y)) {
            *report.dropped.entry("invalid_year".into()).or_default() += 1;
        } else {
            kept.push(r);
        }
    }

    // Union records sharing an id or a normalized (title, year).
    let n = kept.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    let mut by_key: HashMap<TitleKey, usize> = HashMap::new();
    for (i, r) in kept.iter().enumerate() {
        let key = (normalize_title(&r.title), r.year);
        for first in [by_id.get(r.id.as_str()).copied(), by_key.get(&key).copied()]
            .into_iter()
            .flatten()
        {
            let (a, b) = (find(&mut parent, first), find(&mut parent, i));
            if a != b {
                parent[b.max(a)] = a.min(b);
            }
        }
        by_id.entry(r.id.as_str()).or_insert(i);
        by_key.entry(key).or_insert(i);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }

    let mut merged = Vec::with_capacity(groups.len());
    for members in groups.values() {
        report.merged_duplicates += members.len() - 1;
        let mut order = members.clone();
        if policy == ConflictPolicy::PreferMostFields {
            order.sort_by(|&a, &b| {
                kept[b]
                    .filled_fields()
                    .cmp(&kept[a].filled_fields())
                    .then_with(|| kept[a].id.cmp(&kept[b].id))
            });
        }
        let mut base = kept[order[0]].clone();
        for &j in &order[1..] {
            base.fill_from(&kept[j]);
        }
        match base.missing_essential() {
            Some(reason) => *report.dropped.entry(reason.into()).or_default() += 1,
            None => merged.push(base),
        }
    }

    // Merging two groups can make their chosen (title, year) collide only if
    // years were filled in from a sibling; resolve by keeping the smaller id.
    merged.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen: HashMap<TitleKey, ()> = HashMap::new();
    let mut seen_ids: HashMap<String, ()> = HashMap::new();
    let mut unique = Vec::with_capacity(merged.len());
    for e in merged {
        let key = (normalize_title(&e.title), e.year);
        if seen.contains_key(&key) || seen_ids.contains_key(&e.id) {
            report.merged_duplicates += 1;
            continue;
        }
        seen.insert(key, ());
        seen_ids.insert(e.id.clone(), ());
        unique.push(e);
    }

    let index = CorpusIndex::from_entries(unique)?;
    report.size = index.len();
    Ok((index, report))
}

/// Parses a single trailing "(YYYY)" group.
pub fn trailing_year(s: &str) -> Option<i32> {
    let t = s.trim_end();
    let inner = t.strip_suffix(')')?;
    let open = inner.rfind('(')?;
    let digits = inner[open + 1..].trim();
    if digits.len() == 4 && digits.chars().all(|c| c.is_ascii_digit()) {
        digits.parse().ok()
    } else {
        None
    }
}

/// Lowercases, strips one trailing "(YYYY)", removes punctuation and
/// collapses whitespace.
pub fn normalize_title(s: &str) -> String {
    let mut t = s.trim_end();
    if trailing_year(t).is_some() {
        t = &t[..t.rfind('(').expect("checked by trailing_year")];
    }
    let cleaned: String = t
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalized_similarity(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let max = la.max(lb);
    if max == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / max as f64
}

/// Edit similarity of two titles after normalization, in [0, 1].
pub fn fuzzy_similarity(a: &str, b: &str) -> f64 {
    normalized_similarity(&normalize_title(a), &normalize_title(b))
}

/// Resolves every raw mention in the conversation to corpus ids. Mentions
/// that cannot be matched are appended to the conversation's unresolved list.
pub fn link_mentions(conv: &Conversation, index: &CorpusIndex) -> Conversation {
    let mut out = conv.clone();
    for turn in &mut out.turns {
        for mention in std::mem::take(&mut turn.mentions) {
            match index.resolve_mention(&mention) {
                Some((id, _)) => {
                    if !turn.items.contains(&id) {
                        turn.items.push(id);
                    }
                }
                None => out.unresolved.push(mention),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Role, Turn};

    pub(crate) fn shawshank() -> MovieEntry {
        MovieEntry {
            id: "tt0111161".into(),
            title: "The Shawshank Redemption".into(),
            year: Some(1994),
            genre: vec!["Drama".into()],
            director: vec!["Frank Darabont".into()],
            cast: vec!["Tim Robbins".into(), "Morgan Freeman".into()],
            plot: "Two imprisoned men bond over a number of years.".into(),
        }
    }

    fn heat() -> MovieEntry {
        MovieEntry {
            id: "tt0113277".into(),
            title: "Heat".into(),
            year: Some(1995),
            genre: vec!["Crime".into(), "Drama".into()],
            director: vec!["Michael Mann".into()],
            cast: vec!["Al Pacino".into(), "Robert De Niro".into()],
            plot: "A group of high-end professional thieves start to feel the heat.".into(),
        }
    }

    fn write_jsonl(dir: &Path, name: &str, recs: &[serde_json::Value]) -> PathBuf {
        let p = dir.join(name);
        let body: String = recs.iter().map(|r| format!("{r}\n")).collect();
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn fuzzy_similarity_examples() {
        assert_eq!(fuzzy_similarity("Heat", "Heat"), 1.0);
        assert_eq!(fuzzy_similarity("Heat (1995)", "heat"), 1.0);
        assert_eq!(fuzzy_similarity("abcd", "abce"), 0.75);
        assert_eq!(fuzzy_similarity("", ""), 1.0);
    }

    #[test]
    fn normalization_strips_one_year_group() {
        assert_eq!(normalize_title("  The  Matrix (1999) "), "the matrix");
        assert_eq!(normalize_title("Alien: Resurrection"), "alien resurrection");
        assert_eq!(normalize_title("1917 (2019)"), "1917");
        assert_eq!(normalize_title("Blade Runner (Final Cut)"), "blade runner final cut");
        assert_eq!(trailing_year("Heat (1995)"), Some(1995));
        assert_eq!(trailing_year("Heat"), None);
    }

    #[test]
    fn duplicate_titles_merge_into_full_entry() {
        let dir = tempfile::tempdir().unwrap();
        let full = serde_json::to_value(shawshank()).unwrap();
        let partial = serde_json::json!({
            "id": "ml-318", "title": "The Shawshank Redemption", "year": 1994,
            "genre": ["Drama"], "director": ["Frank Darabont"], "cast": ["Tim Robbins"]
        });
        let p = write_jsonl(dir.path(), "a.jsonl", &[partial, full]);
        let (index, report) = ingest_sources(&[p], ConflictPolicy::PreferMostFields).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index.get("tt0111161"), Some(&shawshank()));
        assert_eq!(report.merged_duplicates, 1);
    }

    #[test]
    fn prefer_first_keeps_first_id_and_fills_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let partial = serde_json::json!({
            "id": "ml-318", "title": "The Shawshank Redemption", "year": 1994
        });
        let p = write_jsonl(
            dir.path(),
            "a.jsonl",
            &[partial, serde_json::to_value(shawshank()).unwrap()],
        );
        let (index, _) = ingest_sources(&[p], ConflictPolicy::PreferFirst).unwrap();
        let e = index.get("ml-318").unwrap();
        assert_eq!(e.plot, shawshank().plot);
    }

    #[test]
    fn empty_source_list_gives_empty_index() {
        let (index, report) = ingest_sources(&[], ConflictPolicy::default()).unwrap();
        assert!(index.is_empty());
        assert_eq!(report.size, 0);
    }

    #[test]
    fn ten_records_three_duplicates() {
        // 7 distinct (title, year) pairs; records 7..9 repeat 0, 3 and 5
        // (one under a different id, one with different casing).
        let base: Vec<serde_json::Value> = (0..7)
            .map(|i| {
                serde_json::json!({
                    "id": format!("tt{i:07}"), "title": format!("Film Number {i}"), "year": 2000 + i,
                    "genre": ["g"], "director": ["d"], "cast": ["c"], "plot": "p"
                })
            })
            .collect();
        let mut recs = base.clone();
        recs.push(base[0].clone());
        let mut dup3 = base[3].clone();
        dup3["id"] = "other-3".into();
        recs.push(dup3);
        let mut dup5 = base[5].clone();
        dup5["title"] = "FILM number 5".into();
        recs.push(dup5);
        assert_eq!(recs.len(), 10);
        let dir = tempfile::tempdir().unwrap();
        let p = write_jsonl(dir.path(), "ten.jsonl", &recs);
        let (index, report) = ingest_sources(&[p], ConflictPolicy::default()).unwrap();
        assert_eq!(index.len(), 7);
        assert_eq!(report.merged_duplicates, 3);
        assert_eq!(report.records_read, 10);
        // tie on filled fields -> lexicographically smaller id wins
        assert!(index.contains("other-3"));
    }

    #[test]
    fn incomplete_entries_are_dropped_with_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            serde_json::to_value(heat()).unwrap(),
            serde_json::json!({"id": "x1", "title": "No Plot", "genre": ["a"], "director": ["b"], "cast": ["c"]}),
            serde_json::json!({"id": "", "title": "No Id"}),
            serde_json::json!({"id": "x2", "title": "Too Old", "year": 1700}),
        ];
        let p = write_jsonl(dir.path(), "d.jsonl", &recs);
        let (index, report) = ingest_sources(&[p], ConflictPolicy::default()).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(report.dropped.get("missing_plot"), Some(&1));
        assert_eq!(report.dropped.get("missing_id"), Some(&1));
        assert_eq!(report.dropped.get("invalid_year"), Some(&1));
    }

    #[test]
    fn ingestion_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            serde_json::to_value(heat()).unwrap(),
            serde_json::to_value(shawshank()).unwrap(),
            serde_json::to_value(shawshank()).unwrap(),
        ];
        let p = write_jsonl(dir.path(), "i.jsonl", &recs);
        let (a, _) = ingest_sources(&[p.clone()], ConflictPolicy::default()).unwrap();
        let (b, _) = ingest_sources(&[p], ConflictPolicy::default()).unwrap();
        assert_eq!(a, b);
        let out = dir.path().join("out.jsonl");
        a.write_jsonl(&out).unwrap();
        let (c, _) = ingest_sources(&[out], ConflictPolicy::default()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn errors_name_path_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, format!("{}\n{{not json\n", serde_json::to_string(&heat()).unwrap())).unwrap();
        match ingest_sources(&[p], ConflictPolicy::default()) {
            Err(RarError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let missing = dir.path().join("nope.jsonl");
        let err = ingest_sources(&[missing], ConflictPolicy::default()).unwrap_err();
        assert!(err.to_string().contains("nope.jsonl"));
    }

    #[test]
    fn mentions_link_exact_then_fuzzy() {
        let index = CorpusIndex::from_entries([shawshank(), heat()]).unwrap();
        assert_eq!(
            index.resolve_mention("The Shawshank Redemption (1994)"),
            Some(("tt0111161".to_string(), 1.0))
        );
        assert_eq!(index.resolve_mention("Heat"), Some(("tt0113277".to_string(), 1.0)));

        // "shawshenk redemption" vs "the shawshank redemption": 4 inserts + 1
        // substitution over 24 chars -> 19/24 < 0.85, unresolved.
        let sim = fuzzy_similarity("Shawshenk Redemption", "The Shawshank Redemption");
        assert!((sim - 19.0 / 24.0).abs() < 1e-12);
        assert_eq!(index.resolve_mention("Shawshenk Redemption"), None);
        // one substitution over 24 chars -> 23/24 >= 0.85
        assert_eq!(
            index.resolve_mention("The Shawshenk Redemption").map(|(id, _)| id),
            Some("tt0111161".to_string())
        );

        let conv = Conversation {
            id: "c1".into(),
            turns: vec![Turn {
                role: Role::Seeker,
                text: "I loved Heat and Shawshenk Redemption".into(),
                items: vec![],
                mentions: vec!["Heat (1995)".into(), "Shawshenk Redemption".into()],
            }],
            unresolved: vec![],
        };
        let linked = link_mentions(&conv, &index);
        assert_eq!(linked.turns[0].items, vec!["tt0113277".to_string()]);
        assert_eq!(linked.unresolved, vec!["Shawshenk Redemption".to_string()]);
        assert!(linked.turns[0].mentions.is_empty());
    }
}
