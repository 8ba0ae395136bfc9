//! Labelled window datasets: label alignment, persistence and
//! leave-one-group-out splits.
//!
//! A dataset binds flow windows to per-interval activity labels and a group
//! identifier (one group per participant or per simulation seed). The
//! on-disk container is a directory holding one `AEFW` file per group, a
//! `labels.csv` assignment table and a `manifest.txt` with the class table,
//! group list and the config hash of the producing run.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::echo::FlowWindow;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("label intervals overlap at {0} s")]
    OverlappingIntervals(f64),
    #[error("label intervals not sorted at {0} s")]
    UnsortedIntervals(f64),
    #[error("unknown class '{0}'")]
    UnknownClass(String),
    #[error("unknown group '{0}'")]
    UnknownGroup(String),
    #[error("split would leave training set empty")]
    EmptyTrainSplit,
    #[error("class table must contain exactly one 'null' class")]
    MissingNullClass,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("labels csv: {0}")]
    LabelsCsv(String),
}

/// One activity class: a dense id and a display name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ActivityClassId {
    pub id: u16,
    pub name: String,
}

/// Dense class table with exactly one `null` class.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassTable {
    classes: Vec<ActivityClassId>,
}

impl ClassTable {
    /// Build a table from names, appending `null` if absent. Ids are dense
    /// in listing order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, DatasetError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut classes = Vec::new();
        for n in names {
            let name = n.as_ref().to_string();
            if !seen.insert(name.clone()) {
                continue;
            }
            classes.push(ActivityClassId { id: classes.len() as u16, name });
        }
        if !classes.iter().any(|c| c.name == "null") {
            classes.push(ActivityClassId { id: classes.len() as u16, name: "null".into() });
        }
        if classes.iter().filter(|c| c.name == "null").count() != 1 {
            return Err(DatasetError::MissingNullClass);
        }
        Ok(Self { classes })
    }

    /// Rebuild a table from explicit (id, name) pairs, validating id density
    /// and the single null class.
    pub fn from_classes(classes: Vec<ActivityClassId>) -> Result<Self, DatasetError> {
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(DatasetError::Manifest(format!(
                    "class ids not dense: '{}' has id {} at position {i}",
                    c.name, c.id
                )));
            }
        }
        if classes.iter().filter(|c| c.name == "null").count() != 1 {
            return Err(DatasetError::MissingNullClass);
        }
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ActivityClassId] {
        &self.classes
    }

    pub fn by_name(&self, name: &str) -> Option<&ActivityClassId> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn by_id(&self, id: u16) -> Option<&ActivityClassId> {
        self.classes.get(id as usize)
    }

    pub fn null_class(&self) -> &ActivityClassId {
        self.classes.iter().find(|c| c.name == "null").expect("table has a null class")
    }
}

/// A flow window with its activity label and originating group.
#[derive(Debug, Clone)]
pub struct LabeledWindow {
    pub window: FlowWindow,
    pub label: ActivityClassId,
    pub group: String,
}

/// The full labelled dataset. Items are kept grouped (all windows of one
/// group contiguous) in insertion order of groups.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    items: Vec<LabeledWindow>,
    classes: ClassTable,
    /// Frame rate of the underlying flow, needed when persisting.
    pub frame_rate: f64,
}

impl LabeledDataset {
    pub fn new(
        mut items: Vec<LabeledWindow>,
        classes: ClassTable,
        frame_rate: f64,
    ) -> Result<Self, DatasetError> {
        for item in &items {
            if classes.by_id(item.label.id).map(|c| &c.name) != Some(&item.label.name) {
                return Err(DatasetError::UnknownClass(item.label.name.clone()));
            }
        }
        // group items without reordering groups' first appearance
        let mut order: Vec<String> = Vec::new();
        for item in &items {
            if !order.contains(&item.group) {
                order.push(item.group.clone());
            }
        }
        items.sort_by_key(|item| order.iter().position(|g| *g == item.group).unwrap());
        Ok(Self { items, classes, frame_rate })
    }

    pub fn items(&self) -> &[LabeledWindow] {
        &self.items
    }

    pub fn classes(&self) -> &ClassTable {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct groups in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out = Vec::new();
        for item in &self.items {
            if !out.contains(&item.group) {
                out.push(item.group.clone());
            }
        }
        out
    }

    /// Apply a window transform (e.g. a region crop) to every item.
    pub fn map_windows(&self, f: impl Fn(&FlowWindow) -> FlowWindow) -> Self {
        let items = self
            .items
            .iter()
            .map(|it| LabeledWindow {
                window: f(&it.window),
                label: it.label.clone(),
                group: it.group.clone(),
            })
            .collect();
        Self { items, classes: self.classes.clone(), frame_rate: self.frame_rate }
    }
}

/// A labelling interval: class `label` applies to [start_s, end_s).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelInterval {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

/// Assign each window the class covering the majority of its span.
///
/// Windows without any covering interval become `null`; windows straddling a
/// boundary take the majority side, ties going to the earlier interval.
pub fn align_labels(
    windows: Vec<FlowWindow>,
    intervals: &[LabelInterval],
    window_duration_s: f64,
    group: &str,
    classes: &ClassTable,
) -> Result<Vec<LabeledWindow>, DatasetError> {
    for pair in intervals.windows(2) {
        if pair[1].start_s < pair[0].start_s {
            return Err(DatasetError::UnsortedIntervals(pair[1].start_s));
        }
        if pair[1].start_s < pair[0].end_s {
            return Err(DatasetError::OverlappingIntervals(pair[1].start_s));
        }
    }
    for interval in intervals {
        if classes.by_name(&interval.label).is_none() {
            return Err(DatasetError::UnknownClass(interval.label.clone()));
        }
    }
    let null = classes.null_class().clone();
    let mut out = Vec::with_capacity(windows.len());
    for window in windows {
        let (w_start, w_end) = (window.start_time, window.start_time + window_duration_s);
        let mut best: Option<(&LabelInterval, f64)> = None;
        for interval in intervals {
            let overlap = interval.end_s.min(w_end) - interval.start_s.max(w_start);
            if overlap <= 0.0 {
                continue;
            }
            // strictly-greater keeps ties on the earlier interval
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((interval, overlap));
            }
        }
        let label = match best {
            Some((interval, _)) => classes.by_name(&interval.label).unwrap().clone(),
            None => null.clone(),
        };
        out.push(LabeledWindow { window, label, group: group.to_string() });
    }
    Ok(out)
}

/// Exact disjoint split: test = all items of `held_out`, train = the rest.
pub fn split_leave_one_group_out(
    ds: &LabeledDataset,
    held_out: &str,
) -> Result<(LabeledDataset, LabeledDataset), DatasetError> {
    if !ds.groups().iter().any(|g| g == held_out) {
        return Err(DatasetError::UnknownGroup(held_out.to_string()));
    }
    let (test, train): (Vec<_>, Vec<_>) =
        ds.items.iter().cloned().partition(|item| item.group == held_out);
    if train.is_empty() {
        return Err(DatasetError::EmptyTrainSplit);
    }
    Ok((
        LabeledDataset::new(train, ds.classes.clone(), ds.frame_rate)?,
        LabeledDataset::new(test, ds.classes.clone(), ds.frame_rate)?,
    ))
}

/// Read label intervals from CSV with header `start_s,end_s,label`.
pub fn read_label_csv(path: &Path) -> Result<Vec<LabelInterval>, DatasetError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
        if rec.len() < 3 {
            return Err(DatasetError::LabelsCsv(format!("expected 3 columns, got {}", rec.len())));
        }
        out.push(LabelInterval {
            start_s: rec[0].trim().parse().map_err(|e| DatasetError::LabelsCsv(format!("start_s: {e}")))?,
            end_s: rec[1].trim().parse().map_err(|e| DatasetError::LabelsCsv(format!("end_s: {e}")))?,
            label: rec[2].trim().to_string(),
        });
    }
    Ok(out)
}

/// Write label intervals as CSV with header `start_s,end_s,label`.
pub fn write_label_csv(path: &Path, intervals: &[LabelInterval]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
    w.write_record(["start_s", "end_s", "label"])
        .map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
    for i in intervals {
        w.write_record([i.start_s.to_string(), i.end_s.to_string(), i.label.clone()])
            .map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Persist a dataset as a container directory.
pub fn write_dataset(dir: &Path, ds: &LabeledDataset, config_hash: u64) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    let groups = ds.groups();
    // one AEFW per group, windows in item order
    let mut per_group: BTreeMap<&str, Vec<&LabeledWindow>> = BTreeMap::new();
    for item in ds.items() {
        per_group.entry(&item.group).or_default().push(item);
    }
    for (group, items) in &per_group {
        let windows: Vec<FlowWindow> = items.iter().map(|i| i.window.clone()).collect();
        container::write_windows(
            &dir.join(format!("windows-{group}.aefw")),
            &windows,
            ds.frame_rate,
            config_hash,
        )?;
    }
    // labels.csv: file, window index, label, group
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))
        .map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
    w.write_record(["file", "window", "label", "group"])
        .map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
    for (group, items) in &per_group {
        for (idx, item) in items.iter().enumerate() {
            w.write_record([
                format!("windows-{group}.aefw"),
                idx.to_string(),
                item.label.name.clone(),
                (*group).to_string(),
            ])
            .map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
        }
    }
    w.flush()?;
    // manifest
    let class_spec: Vec<String> =
        ds.classes.classes().iter().map(|c| format!("{}:{}", c.id, c.name)).collect();
    let manifest = format!(
        "classes={}\ngroups={}\nconfig_hash={:#018x}\nframe_rate={}\n",
        class_spec.join(";"),
        groups.join(","),
        config_hash,
        ds.frame_rate,
    );
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a dataset container, checking that every AEFW file carries the
/// manifest's config hash.
pub fn read_dataset(dir: &Path) -> Result<(LabeledDataset, u64), DatasetError> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut classes_line = None;
    let mut groups_line = None;
    let mut hash_line = None;
    let mut rate_line = None;
    for line in manifest.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k {
                "classes" => classes_line = Some(v.to_string()),
                "groups" => groups_line = Some(v.to_string()),
                "config_hash" => hash_line = Some(v.to_string()),
                "frame_rate" => rate_line = Some(v.to_string()),
                other => return Err(DatasetError::Manifest(format!("unknown key '{other}'"))),
            }
        }
    }
    let classes_line = classes_line.ok_or_else(|| DatasetError::Manifest("missing classes".into()))?;
    let groups_line = groups_line.ok_or_else(|| DatasetError::Manifest("missing groups".into()))?;
    let hash_line = hash_line.ok_or_else(|| DatasetError::Manifest("missing config_hash".into()))?;
    let rate_line = rate_line.ok_or_else(|| DatasetError::Manifest("missing frame_rate".into()))?;
    let config_hash = u64::from_str_radix(hash_line.trim_start_matches("0x"), 16)
        .map_err(|e| DatasetError::Manifest(format!("config_hash: {e}")))?;
    let frame_rate: f64 =
        rate_line.parse().map_err(|e| DatasetError::Manifest(format!("frame_rate: {e}")))?;

    let mut names = Vec::new();
    for spec in classes_line.split(';').filter(|s| !s.is_empty()) {
        let (_, name) =
            spec.split_once(':').ok_or_else(|| DatasetError::Manifest(format!("bad class '{spec}'")))?;
        names.push(name.to_string());
    }
    let classes = ClassTable::from_names(&names)?;

    // per-group windows
    let mut windows_by_group: BTreeMap<String, Vec<FlowWindow>> = BTreeMap::new();
    for group in groups_line.split(',').filter(|s| !s.is_empty()) {
        let path = dir.join(format!("windows-{group}.aefw"));
        let (windows, _, file_hash) = container::read_windows(&path)?;
        if file_hash != config_hash {
            return Err(ContainerError::HashMismatch { file: file_hash, expected: config_hash }.into());
        }
        windows_by_group.insert(group.to_string(), windows);
    }

    // label assignments
    let mut rdr = csv::Reader::from_path(dir.join("labels.csv"))
        .map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
    let mut items = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DatasetError::LabelsCsv(e.to_string()))?;
        let idx: usize =
            rec[1].parse().map_err(|e| DatasetError::LabelsCsv(format!("window: {e}")))?;
        let label = classes
            .by_name(rec[2].trim())
            .ok_or_else(|| DatasetError::UnknownClass(rec[2].to_string()))?
            .clone();
        let group = rec[3].trim().to_string();
        let window = windows_by_group
            .get(&group)
            .and_then(|ws| ws.get(idx))
            .ok_or_else(|| DatasetError::LabelsCsv(format!("no window {idx} in group {group}")))?
            .clone();
        items.push(LabeledWindow { window, label, group });
    }
    Ok((LabeledDataset::new(items, classes, frame_rate)?, config_hash))
}
