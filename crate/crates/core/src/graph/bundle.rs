//! Bundle directories: `meta.json`, `edges.tsv`, `features.csv`,
//! `labels.csv`, optional `split.csv` and optional `classes.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::math::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
            Role::Unlabeled => "unlabeled",
        }
    }

    fn parse(s: &str) -> Option<Role> {
        Some(match s {
            "train" => Role::Train,
            "val" => Role::Val,
            "test" => Role::Test,
            "unlabeled" => Role::Unlabeled,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: Graph,
    pub features: Tensor,
    /// `None` marks a node without a label (`-1` in `labels.csv`).
    pub labels: Vec<Option<usize>>,
    pub roles: Vec<Role>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

/// What the loader had to repair or fill in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadNotes {
    pub dropped_edges: usize,
    pub generated_split: bool,
}

impl DatasetBundle {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn meta(&self) -> Meta {
        Meta {
            name: self.name.clone(),
            n: self.n(),
            m: self.graph.m(),
            d: self.features.cols(),
            num_classes: self.num_classes,
        }
    }

    pub fn mask(&self, role: Role) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    /// Checks the cross-file invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.features.rows() != n || self.labels.len() != n || self.roles.len() != n {
            return Err(Error::contract(format!(
                "bundle rows disagree: n={n}, features={}, labels={}, roles={}",
                self.features.rows(),
                self.labels.len(),
                self.roles.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::contract("bundle has zero classes"));
        }
        for (i, l) in self.labels.iter().enumerate() {
            match (l, self.roles[i]) {
                (Some(c), _) if *c >= self.num_classes => {
                    return Err(Error::contract(format!("label {c} of node {i} out of range")))
                }
                (None, Role::Train | Role::Val | Role::Test) => {
                    return Err(Error::contract(format!(
                        "node {i} has role {} but no label",
                        self.roles[i].as_str()
                    )))
                }
                _ => {}
            }
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite("bundle features".into()));
        }
        Ok(())
    }

    /// Label of node `i`, which must be labeled.
    pub fn label(&self, i: usize) -> usize {
        self.labels[i].expect("labeled node")
    }

    /// Full label vector, or a contract error naming the first unlabeled node.
    pub fn full_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::contract(format!("node {i} is unlabeled"))))
            .collect()
    }
}

/// Shortest text that parses back to exactly the same `f64`.
pub fn format_float(x: f64) -> String {
    let plain = format!("{x}");
    if plain.len() <= 24 {
        return plain;
    }
    format!("{x:e}")
}

/// 20 train nodes per class; then 500 val / 1000 test when enough labeled
/// nodes remain, else the remainder split evenly. Leftovers are unlabeled.
pub fn default_split(labels: &[Option<usize>], num_classes: usize, rng: &mut Rng) -> Vec<Role> {
    const PER_CLASS: usize = 20;
    let mut roles = vec![Role::Unlabeled; labels.len()];
    let mut rest = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(c)).collect();
        rng.shuffle(&mut members);
        let k = PER_CLASS.min(members.len());
        for &i in &members[..k] {
            roles[i] = Role::Train;
        }
        rest.extend_from_slice(&members[k..]);
    }
    rest.sort_unstable();
    rng.shuffle(&mut rest);
    let (n_val, n_test) = if rest.len() >= 1500 {
        (500, 1000)
    } else {
        let half = rest.len() / 2;
        (half, rest.len() - half)
    };
    for &i in &rest[..n_val] {
        roles[i] = Role::Val;
    }
    for &i in &rest[n_val..n_val + n_test] {
        roles[i] = Role::Test;
    }
    roles
}

fn load_err(file: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Load {
        file: file.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn check_count(path: &Path, found: usize, want: usize) -> Result<()> {
    if found != want {
        return Err(load_err(
            path,
            found + 1,
            format!("expected {want} rows, found {found}"),
        ));
    }
    Ok(())
}

/// Loads and validates a bundle. A missing `split.csv` is replaced by
/// [`default_split`] drawn from `split_seed`.
pub fn read_bundle(dir: &Path, split_seed: u64) -> Result<(DatasetBundle, LoadNotes)> {
    let mut notes = LoadNotes::default();

    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read_text(&meta_path)?).map_err(|e| Error::json(&meta_path, e))?;
    let n = meta.n;

    let edges_path = dir.join("edges.tsv");
    let text = read_text(&edges_path)?;
    let mut pairs = Vec::new();
    for (line, l) in data_lines(&text) {
        let mut it = l.split('\t');
        let mut field = || -> Result<usize> {
            let s = it
                .next()
                .ok_or_else(|| load_err(&edges_path, line, "expected two tab-separated ids"))?;
            let v: usize = s
                .trim()
                .parse()
                .map_err(|_| load_err(&edges_path, line, format!("bad node id {s:?}")))?;
            if v >= n {
                return Err(load_err(
                    &edges_path,
                    line,
                    format!("node id {v} out of range for n = {n}"),
                ));
            }
            Ok(v)
        };
        let u = field()?;
        let v = field()?;
        pairs.push((u, v));
    }
    let (graph, dropped) = Graph::from_pairs(n, pairs)?;
    notes.dropped_edges = dropped;
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} self-loop or duplicate edges",
            edges_path.display()
        );
    }
    if graph.m() != meta.m {
        log::warn!(
            "{}: meta.json declares m = {} but {} undirected edges remain",
            meta_path.display(),
            meta.m,
            graph.m()
        );
    }

    let feat_path = dir.join("features.csv");
    let text = read_text(&feat_path)?;
    let mut data = Vec::with_capacity(n * meta.d);
    let mut rows = 0;
    for (line, l) in data_lines(&text) {
        if rows == n {
            return Err(load_err(&feat_path, line, format!("more than {n} rows")));
        }
        let before = data.len();
        for s in l.split(',') {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| load_err(&feat_path, line, format!("non-numeric feature {s:?}")))?;
            if !v.is_finite() {
                return Err(load_err(&feat_path, line, format!("non-finite feature {s:?}")));
            }
            data.push(v);
        }
        if data.len() - before != meta.d {
            return Err(load_err(
                &feat_path,
                line,
                format!("expected {} columns, found {}", meta.d, data.len() - before),
            ));
        }
        rows += 1;
    }
    check_count(&feat_path, rows, n)?;
    let features = Tensor::new(n, meta.d, data)?;

    let label_path = dir.join("labels.csv");
    let text = read_text(&label_path)?;
    let mut labels = Vec::with_capacity(n);
    for (line, l) in data_lines(&text) {
        let v: i64 = l
            .trim()
            .parse()
            .map_err(|_| load_err(&label_path, line, format!("bad label {l:?}")))?;
        let label = match v {
            -1 => None,
            v if v >= 0 && (v as usize) < meta.num_classes => Some(v as usize),
            v => {
                return Err(load_err(
                    &label_path,
                    line,
                    format!("label {v} outside [0, {})", meta.num_classes),
                ))
            }
        };
        labels.push(label);
    }
    check_count(&label_path, labels.len(), n)?;

    let split_path = dir.join("split.csv");
    let roles = if split_path.exists() {
        let text = read_text(&split_path)?;
        let mut roles = Vec::with_capacity(n);
        for (line, l) in data_lines(&text) {
            let r = Role::parse(l.trim()).ok_or_else(|| load_err(&split_path, line, format!("unknown role {l:?}")))?;
            if r != Role::Unlabeled && labels.get(roles.len()).copied().flatten().is_none() {
                return Err(load_err(&split_path, line, "role requires a label"));
            }
            roles.push(r);
        }
        check_count(&split_path, roles.len(), n)?;
        roles
    } else {
        notes.generated_split = true;
        default_split(&labels, meta.num_classes, &mut Rng::new(split_seed))
    };

    let classes_path = dir.join("classes.txt");
    let class_names = if classes_path.exists() {
        Some(read_text(&classes_path)?.lines().map(str::to_owned).collect())
    } else {
        None
    };

    let bundle = DatasetBundle {
        name: meta.name,
        graph,
        features,
        labels,
        roles,
        num_classes: meta.num_classes,
        class_names,
    };
    bundle.validate()?;
    Ok((bundle, notes))
}

/// [`read_bundle`] with split seed 0.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    read_bundle(dir, 0).map(|(b, _)| b)
}

pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };

    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&bundle.meta()).map_err(|e| Error::json(&meta_path, e))?;
    write("meta.json", meta + "\n")?;

    let mut s = String::new();
    for &(u, v) in bundle.graph.edges() {
        writeln!(s, "{u}\t{v}").unwrap();
    }
    write("edges.tsv", s)?;

    let mut s = String::with_capacity(bundle.features.len() * 4);
    for r in 0..bundle.n() {
        for (k, &x) in bundle.features.row(r).iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            s.push_str(&format_float(x));
        }
        s.push('\n');
    }
    write("features.csv", s)?;

    let mut s = String::new();
    for l in &bundle.labels {
        match l {
            Some(c) => writeln!(s, "{c}").unwrap(),
            None => s.push_str("-1\n"),
        }
    }
    write("labels.csv", s)?;

    let mut s = String::new();
    for r in &bundle.roles {
        s.push_str(r.as_str());
        s.push('\n');
    }
    write("split.csv", s)?;

    if let Some(names) = &bundle.class_names {
        let mut s = String::new();
        for c in names {
            s.push_str(c);
            s.push('\n');
        }
        write("classes.txt", s)?;
    }
    Ok(())
}
