//! Subject-independent train/validation/test split construction.
//!
//! A greedy local search over single-session relocations, scored by a
//! weighted sum of balance costs. Participants never appear in more than
//! one of train/val/test; sessions that cannot be placed are removed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metadata::Gender;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("sample is empty")]
    EmptySample,
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least two observations")]
    TooFewObservations,
    #[error("correlation is undefined for a constant variable")]
    ZeroVariance,
    #[error("at least 3 sessions are required, got {0}")]
    TooFewSessions(usize),
    #[error("session {0}: {1}")]
    InvalidRecord(String, String),
    #[error("no valid split: {diagnostic}")]
    Infeasible {
        diagnostic: String,
        best: SplitAssignment,
    },
    #[error("assignment line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, SplitError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Removed,
}

impl Split {
    pub const KEPT: [Split; 3] = [Split::Train, Split::Val, Split::Test];
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Removed];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Removed => "removed",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// Per-participant attributes used by the balance statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantInfo {
    pub id: String,
    pub age: f64,
    pub gender: Gender,
    pub ocean: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub participants: [ParticipantInfo; 2],
    /// Gender × age-group × relationship combination label.
    pub group: String,
}

/// Age bins 0–18, 19–35, 36–50, 51+.
pub fn age_group(age: f64) -> usize {
    match age {
        a if a < 19.0 => 0,
        a if a < 36.0 => 1,
        a if a < 51.0 => 2,
        _ => 3,
    }
}

/// Canonical group label of a session.
pub fn group_label(a: &ParticipantInfo, b: &ParticipantInfo, relationship_known: bool) -> String {
    let mut genders = [a.gender, b.gender].map(|g| if g == Gender::F { 'F' } else { 'M' });
    genders.sort();
    let mut ages = [age_group(a.age), age_group(b.age)];
    ages.sort();
    format!(
        "{}{}-{}{}-{}",
        genders[0],
        genders[1],
        ages[0],
        ages[1],
        if relationship_known { 'Y' } else { 'N' }
    )
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub splits: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, session: &str) -> Option<Split> {
        self.splits.get(session).copied()
    }

    pub fn sessions_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.splits.iter().filter(move |(_, s)| **s == split).map(|(id, _)| id.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.values().filter(|s| **s == split).count()
    }

    /// Participant ids per kept split.
    pub fn participants(&self, records: &[SessionRecord]) -> [BTreeSet<String>; 3] {
        let mut sets: [BTreeSet<String>; 3] = Default::default();
        for r in records {
            if let Some(s) = self.get(&r.session_id).filter(|s| *s != Split::Removed) {
                for p in &r.participants {
                    sets[s.index()].insert(p.id.clone());
                }
            }
        }
        sets
    }

    /// No participant appears in two of train/val/test.
    pub fn is_subject_independent(&self, records: &[SessionRecord]) -> bool {
        let [a, b, c] = self.participants(records);
        a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(["session_id", "split"]).unwrap();
        for (id, s) in &self.splits {
            w.write_record([id.as_str(), s.name()]).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| SplitError::Parse { line: 1, reason: e.to_string() })?;
        if headers.iter().collect::<Vec<_>>() != ["session_id", "split"] {
            return Err(SplitError::Parse { line: 1, reason: "expected header session_id,split".into() });
        }
        let mut splits = BTreeMap::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| SplitError::Parse { line, reason: e.to_string() })?;
            if rec.len() != 2 {
                return Err(SplitError::Parse { line, reason: format!("expected 2 fields, got {}", rec.len()) });
            }
            let split = rec[1].parse().map_err(|reason| SplitError::Parse { line, reason })?;
            if splits.insert(rec[0].to_string(), split).is_some() {
                return Err(SplitError::Parse { line, reason: format!("duplicate session {}", &rec[0]) });
            }
        }
        Ok(SplitAssignment { splits })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub ks: f64,
    pub correlation: f64,
    pub uniformity: f64,
    pub group: f64,
    pub retention: f64,
    pub alpha: f64,
    /// Train/val/test proportions of retained sessions.
    pub target_ratios: [f64; 3],
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            ks: 1.0,
            correlation: 1.0,
            uniformity: 1.0,
            group: 1.0,
            retention: 1.0,
            alpha: 0.05,
            target_ratios: [0.8, 0.1, 0.1],
        }
    }
}

/// Unweighted components and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SplitCosts {
    pub ks: f64,
    pub correlation: f64,
    pub uniformity: f64,
    pub group: f64,
    pub retention: f64,
    pub total: f64,
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SplitError::EmptySample);
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (m, n) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < xs.len() && j < ys.len() {
        let x = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= x {
            i += 1;
        }
        while j < ys.len() && ys[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / m - j as f64 / n).abs());
    }
    Ok(d)
}

/// Asymptotic two-sample critical value `c(α)·√((m+n)/(m·n))`.
pub fn ks_critical_value(alpha: f64, m: usize, n: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let (m, n) = (m as f64, n as f64);
    c * ((m + n) / (m * n)).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(SplitError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(SplitError::TooFewObservations);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SplitError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Variables compared by the correlation cost: gender, age, O, C, E, A, N.
fn variables(p: &ParticipantInfo) -> [f64; 7] {
    let g = if p.gender == Gender::M { 1.0 } else { 0.0 };
    [g, p.age, p.ocean[0], p.ocean[1], p.ocean[2], p.ocean[3], p.ocean[4]]
}

fn unique_participants<'a>(records: impl IntoIterator<Item = &'a SessionRecord>) -> Vec<&'a ParticipantInfo> {
    let mut seen = BTreeMap::new();
    for r in records {
        for p in &r.participants {
            seen.entry(p.id.as_str()).or_insert(p);
        }
    }
    seen.into_values().collect()
}

fn correlation_matrix(people: &[&ParticipantInfo]) -> Vec<Option<f64>> {
    let cols: Vec<Vec<f64>> = (0..7).map(|v| people.iter().map(|p| variables(p)[v]).collect()).collect();
    let mut out = vec![];
    for a in 0..7 {
        for b in a + 1..7 {
            out.push(pearson(&cols[a], &cols[b]).ok());
        }
    }
    out
}

/// L1 distance between the normalized histogram and the uniform one. An
/// empty histogram scores the worst case, that of a single occupied bin.
fn uniformity_gap(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let u = 1.0 / counts.len() as f64;
    if total == 0 {
        return 2.0 * (1.0 - u);
    }
    counts.iter().map(|&c| (c as f64 / total as f64 - u).abs()).sum()
}

pub fn split_cost(assignment: &SplitAssignment, records: &[SessionRecord], weights: &CostWeights) -> SplitCosts {
    let split_of = |r: &SessionRecord| assignment.get(&r.session_id).unwrap_or(Split::Removed);
    let members: Vec<Vec<&SessionRecord>> = Split::KEPT
        .iter()
        .map(|&s| records.iter().filter(|r| split_of(r) == s).collect())
        .collect();
    let people: Vec<Vec<&ParticipantInfo>> = members.iter().map(|m| unique_participants(m.iter().copied())).collect();

    // (1) Per-trait KS between every pair of kept splits.
    let mut ks = 0.0;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        if people[a].is_empty() || people[b].is_empty() {
            continue;
        }
        for t in 0..5 {
            let xa: Vec<f64> = people[a].iter().map(|p| p.ocean[t]).collect();
            let xb: Vec<f64> = people[b].iter().map(|p| p.ocean[t]).collect();
            let d = ks_statistic(&xa, &xb).expect("non-empty");
            ks += d;
            if d > ks_critical_value(weights.alpha, xa.len(), xb.len()) {
                ks += 1.0;
            }
        }
    }

    // (2) Correlation structure of each split against the whole population.
    let global = correlation_matrix(&unique_participants(records));
    let mut correlation = 0.0;
    for p in &people {
        if p.len() < 2 {
            continue;
        }
        for (g, s) in global.iter().zip(correlation_matrix(p)) {
            if let (Some(g), Some(s)) = (g, s) {
                correlation += (s - g).abs();
            }
        }
    }

    // (3) Age and gender uniformity in val/test; (4) group uniformity.
    let groups: BTreeSet<&str> = records.iter().map(|r| r.group.as_str()).collect();
    let (mut uniformity, mut group) = (0.0, 0.0);
    for s in [1, 2] {
        let mut gender = [0usize; 2];
        let mut age = [0usize; 4];
        for p in &people[s] {
            gender[(p.gender == Gender::M) as usize] += 1;
            age[age_group(p.age)] += 1;
        }
        uniformity += uniformity_gap(&gender) + uniformity_gap(&age);
        let counts: Vec<usize> = groups
            .iter()
            .map(|g| members[s].iter().filter(|r| r.group == *g).count())
            .collect();
        group += uniformity_gap(&counts);
    }

    // (5) Removed fraction plus deviation from the target proportions.
    let kept: usize = members.iter().map(Vec::len).sum();
    let removed = records.len() - kept;
    let mut retention = if records.is_empty() { 0.0 } else { removed as f64 / records.len() as f64 };
    for (m, target) in members.iter().zip(weights.target_ratios) {
        let ratio = if kept == 0 { 0.0 } else { m.len() as f64 / kept as f64 };
        retention += (ratio - target).abs();
    }

    let total = weights.ks * ks
        + weights.correlation * correlation
        + weights.uniformity * uniformity
        + weights.group * group
        + weights.retention * retention;
    SplitCosts { ks, correlation, uniformity, group, retention, total }
}

fn validate_records(records: &[SessionRecord]) -> Result<()> {
    if records.len() < 3 {
        return Err(SplitError::TooFewSessions(records.len()));
    }
    let mut ids = BTreeSet::new();
    for r in records {
        if r.participants[0].id == r.participants[1].id {
            return Err(SplitError::InvalidRecord(r.session_id.clone(), "both participants are the same person".into()));
        }
        if !ids.insert(r.session_id.as_str()) {
            return Err(SplitError::InvalidRecord(r.session_id.clone(), "duplicate session id".into()));
        }
    }
    Ok(())
}

/// Sessions grouped into connected components of the participant graph.
pub fn session_components(records: &[SessionRecord]) -> Vec<Vec<usize>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        for p in &r.participants {
            let n = index.len();
            index.entry(p.id.as_str()).or_insert(n);
        }
    }
    let mut uf = UnionFind::<usize>::new(index.len());
    for r in records {
        uf.union(index[r.participants[0].id.as_str()], index[r.participants[1].id.as_str()]);
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        comps.entry(uf.find(index[r.participants[0].id.as_str()])).or_default().push(i);
    }
    comps.into_values().collect()
}

/// Seed: whole components, largest first, each to the split furthest below
/// its target share.
fn seed_assignment(records: &[SessionRecord], weights: &CostWeights, seed: u64) -> SplitAssignment {
    let mut comps = session_components(records);
    comps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    let total = records.len() as f64;
    let mut counts = [0usize; 3];
    let mut splits = BTreeMap::new();
    let n = comps.len();
    for (k, comp) in comps.into_iter().enumerate() {
        let deficit = |i: usize| weights.target_ratios[i] * total - counts[i] as f64;
        // Once only as many components remain as there are empty splits,
        // they go to the empty splits.
        let empty: Vec<usize> = (0..3).filter(|&i| counts[i] == 0).collect();
        let candidates: Vec<usize> = if n - k <= empty.len() { empty } else { vec![0, 1, 2] };
        let best = candidates.iter().copied().fold(candidates[0], |b, i| if deficit(i) > deficit(b) { i } else { b });
        counts[best] += comp.len();
        for i in comp {
            splits.insert(records[i].session_id.clone(), Split::KEPT[best]);
        }
    }
    SplitAssignment { splits }
}

/// Whether `session` may move to `to` without a participant appearing in
/// two kept splits.
fn move_allowed(assignment: &SplitAssignment, records: &[SessionRecord], by_participant: &HashMap<&str, Vec<usize>>, session: usize, to: Split) -> bool {
    if to == Split::Removed {
        return true;
    }
    records[session].participants.iter().all(|p| {
        by_participant[p.id.as_str()].iter().all(|&other| {
            other == session || matches!(assignment.get(&records[other].session_id), Some(s) if s == to || s == Split::Removed)
        })
    })
}

/// Greedy split search. `observer` sees the assignment and costs after the
/// seed and after every accepted move.
pub fn greedy_optimize_observed(
    records: &[SessionRecord],
    weights: &CostWeights,
    seed: u64,
    max_iters: usize,
    mut observer: impl FnMut(&SplitAssignment, &SplitCosts),
) -> Result<SplitAssignment> {
    validate_records(records)?;
    let mut by_participant: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        for p in &r.participants {
            by_participant.entry(p.id.as_str()).or_default().push(i);
        }
    }
    let mut assignment = seed_assignment(records, weights, seed);
    let mut cost = split_cost(&assignment, records, weights);
    observer(&assignment, &cost);

    for _ in 0..max_iters {
        // Sessions whose participants still have the most retained sessions
        // are proposed first.
        let retained = |i: usize| {
            records[i]
                .participants
                .iter()
                .map(|p| {
                    by_participant[p.id.as_str()]
                        .iter()
                        .filter(|&&j| assignment.get(&records[j].session_id) != Some(Split::Removed))
                        .count()
                })
                .sum::<usize>()
        };
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| retained(b).cmp(&retained(a)).then_with(|| records[a].session_id.cmp(&records[b].session_id)));

        let mut best: Option<(usize, Split, SplitCosts)> = None;
        for &i in &order {
            let id = &records[i].session_id;
            let from = assignment.get(id).unwrap_or(Split::Removed);
            // A kept split is never emptied: empty splits have no KS or
            // correlation terms and would otherwise look cheap.
            if from != Split::Removed && assignment.count(from) == 1 {
                continue;
            }
            for to in Split::ALL {
                if to == from || !move_allowed(&assignment, records, &by_participant, i, to) {
                    continue;
                }
                assignment.splits.insert(id.clone(), to);
                let c = split_cost(&assignment, records, weights);
                assignment.splits.insert(id.clone(), from);
                let threshold = best.map_or(cost.total, |b| b.2.total);
                if c.total < threshold {
                    best = Some((i, to, c));
                }
            }
        }
        let Some((i, to, c)) = best else { break };
        assignment.splits.insert(records[i].session_id.clone(), to);
        cost = c;
        observer(&assignment, &cost);
    }

    let empty: Vec<&str> = [Split::Val, Split::Test]
        .into_iter()
        .filter(|&s| assignment.count(s) == 0)
        .map(Split::name)
        .collect();
    if !empty.is_empty() {
        let comps = session_components(records);
        let diagnostic = format!(
            "{} left empty; the participant graph has {} connected component(s) over {} sessions, so no subject-independent split can populate every subset",
            empty.join(" and "),
            comps.len(),
            records.len()
        );
        return Err(SplitError::Infeasible { diagnostic, best: assignment });
    }
    Ok(assignment)
}

pub fn greedy_optimize(records: &[SessionRecord], weights: &CostWeights, seed: u64, max_iters: usize) -> Result<SplitAssignment> {
    greedy_optimize_observed(records, weights, seed, max_iters, |_, _| {})
}

/// Balance tables as CSV: KS per trait between split pairs, Pearson per
/// variable pair per split, and counts.
pub fn balance_report(assignment: &SplitAssignment, records: &[SessionRecord], weights: &CostWeights) -> String {
    const VARS: [&str; 7] = ["gender", "age", "O", "C", "E", "A", "N"];
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["table", "split", "other", "variable", "value", "significant"]).unwrap();
    let people: Vec<Vec<&ParticipantInfo>> = Split::KEPT
        .iter()
        .map(|&s| unique_participants(records.iter().filter(|r| assignment.get(&r.session_id) == Some(s))))
        .collect();
    for s in Split::ALL {
        w.write_record(["sessions", s.name(), "", "", &assignment.count(s).to_string(), ""]).unwrap();
    }
    for (i, s) in Split::KEPT.iter().enumerate() {
        w.write_record(["participants", s.name(), "", "", &people[i].len().to_string(), ""]).unwrap();
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        for t in 0..5 {
            let xa: Vec<f64> = people[a].iter().map(|p| p.ocean[t]).collect();
            let xb: Vec<f64> = people[b].iter().map(|p| p.ocean[t]).collect();
            let (value, sig) = match ks_statistic(&xa, &xb) {
                Ok(d) => (format!("{d:.6}"), (d > ks_critical_value(weights.alpha, xa.len(), xb.len())).to_string()),
                Err(_) => (String::new(), String::new()),
            };
            w.write_record(["ks", Split::KEPT[a].name(), Split::KEPT[b].name(), VARS[2 + t], &value, &sig]).unwrap();
        }
    }
    let all = unique_participants(records);
    let groups: [(&str, &[&ParticipantInfo]); 4] = [("all", &all), ("train", &people[0]), ("val", &people[1]), ("test", &people[2])];
    for (name, ps) in groups {
        let m = correlation_matrix(ps);
        let mut k = 0;
        for a in 0..7 {
            for b in a + 1..7 {
                let value = m.get(k).copied().flatten().map(|r| format!("{r:.6}")).unwrap_or_default();
                w.write_record(["pearson", name, "", &format!("{}~{}", VARS[a], VARS[b]), &value, ""]).unwrap();
                k += 1;
            }
        }
    }
    let c = split_cost(assignment, records, weights);
    for (name, v) in [("ks", c.ks), ("correlation", c.correlation), ("uniformity", c.uniformity), ("group", c.group), ("retention", c.retention), ("total", c.total)] {
        w.write_record(["cost", "", "", name, &format!("{v:.6}"), ""]).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
