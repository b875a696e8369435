//! Electrode layouts and the grouping of channels into functional regions.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::trial::EegTrial;

/// 64-electrode cap: FCz reference, AFz ground, 62 recorded channels.
pub const CAP64_ASSET: &str = include_str!("../assets/cap64.layout");
/// Reduced 16-channel montage with two channels per region, for desk-scale runs.
pub const COMPACT16_ASSET: &str = include_str!("../assets/compact16.layout");

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    labels: Vec<String>,
    pub reference: Option<String>,
    pub ground: Option<String>,
    pub sample_rate: f64,
}

impl ChannelLayout {
    pub fn new(
        labels: Vec<String>,
        reference: Option<String>,
        ground: Option<String>,
        sample_rate: f64,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Layout("layout has no data channels".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Layout(format!("duplicate channel label {l}")));
            }
        }
        for (role, excl) in [("reference", &reference), ("ground", &ground)] {
            if let Some(e) = excl {
                if seen.contains(e.as_str()) {
                    return Err(Error::Layout(format!("{role} {e} listed as a data channel")));
                }
            }
        }
        if sample_rate.is_nan() || sample_rate <= 0.0 {
            return Err(Error::Layout(format!("sample rate {sample_rate}")));
        }
        Ok(ChannelLayout {
            labels,
            reference,
            ground,
            sample_rate,
        })
    }

    /// Parses a layout asset.
    ///
    /// One electrode per line, `label` or `label<TAB>role` with role one of
    /// `data`, `reference`, `ground`. `# rate: 200` sets the sample rate
    /// (default 200 Hz); other `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut reference = None;
        let mut ground = None;
        let mut rate = 200.0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("rate:") {
                    rate = v.trim().parse().map_err(|_| {
                        Error::Layout(format!("line {}: bad rate {v:?}", lineno + 1))
                    })?;
                }
                continue;
            }
            let mut fields = line.split_whitespace();
            let label = fields.next().unwrap_or_default().to_string();
            let role = fields.next().unwrap_or("data");
            let slot = match role {
                "data" => {
                    labels.push(label);
                    continue;
                }
                "reference" => &mut reference,
                "ground" => &mut ground,
                other => {
                    return Err(Error::Layout(format!(
                        "line {}: unknown role {other:?}",
                        lineno + 1
                    )))
                }
            };
            if slot.replace(label).is_some() {
                return Err(Error::Layout(format!("line {}: second {role}", lineno + 1)));
            }
        }
        Self::new(labels, reference, ground, rate)
    }

    /// Built-in layouts: `cap64` (62 data channels) and `compact16`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "cap64" => Self::parse(CAP64_ASSET),
            "compact16" => Self::parse(COMPACT16_ASSET),
            other => Err(Error::Layout(format!("unknown layout {other:?}"))),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_channels(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Supported region configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionConfig {
    M8,
    M5,
    M4,
    M3,
    #[serde(rename = "M2_FT")]
    M2Ft,
    #[serde(rename = "M1_F")]
    M1F,
    #[serde(rename = "M1_T")]
    M1T,
}

impl PartitionConfig {
    pub const ALL: [PartitionConfig; 7] = [
        PartitionConfig::M8,
        PartitionConfig::M5,
        PartitionConfig::M4,
        PartitionConfig::M3,
        PartitionConfig::M2Ft,
        PartitionConfig::M1F,
        PartitionConfig::M1T,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PartitionConfig::M8 => "M8",
            PartitionConfig::M5 => "M5",
            PartitionConfig::M4 => "M4",
            PartitionConfig::M3 => "M3",
            PartitionConfig::M2Ft => "M2_FT",
            PartitionConfig::M1F => "M1_F",
            PartitionConfig::M1T => "M1_T",
        }
    }

    /// Number of regions.
    pub fn m(self) -> usize {
        self.groups().len()
    }

    /// Whether every data channel is kept.
    pub fn is_full_cover(self) -> bool {
        matches!(
            self,
            PartitionConfig::M8 | PartitionConfig::M5 | PartitionConfig::M4 | PartitionConfig::M3
        )
    }

    /// Region names paired with the fine regions each one merges.
    pub fn groups(self) -> Vec<(&'static str, Vec<Area>)> {
        use Area::*;
        match self {
            PartitionConfig::M8 => Area::ALL.iter().map(|&a| (a.name(), vec![a])).collect(),
            PartitionConfig::M5 => vec![
                ("frontal", vec![Prefrontal, Frontal]),
                ("temporal", vec![LeftTemporal, RightTemporal]),
                ("central", vec![Precentral, Postcentral]),
                ("parietal", vec![Parietal]),
                ("occipital", vec![Occipital]),
            ],
            PartitionConfig::M4 => vec![
                ("frontal", vec![Prefrontal, Frontal]),
                ("temporal", vec![LeftTemporal, RightTemporal]),
                ("central", vec![Precentral, Postcentral]),
                ("occipital", vec![Parietal, Occipital]),
            ],
            PartitionConfig::M3 => vec![
                ("frontal", vec![Prefrontal, Frontal]),
                (
                    "central",
                    vec![LeftTemporal, RightTemporal, Precentral, Postcentral],
                ),
                ("occipital", vec![Parietal, Occipital]),
            ],
            PartitionConfig::M2Ft => vec![
                ("frontal", vec![Prefrontal, Frontal]),
                ("temporal", vec![LeftTemporal, RightTemporal]),
            ],
            PartitionConfig::M1F => vec![("frontal", vec![Prefrontal, Frontal])],
            PartitionConfig::M1T => vec![("temporal", vec![LeftTemporal, RightTemporal])],
        }
    }
}

impl fmt::Display for PartitionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for PartitionConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PartitionConfig::ALL
            .into_iter()
            .find(|c| c.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Layout(format!("unknown partition config {s:?}")))
    }
}

/// The eight fine functional areas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Area {
    Prefrontal,
    Frontal,
    LeftTemporal,
    RightTemporal,
    Precentral,
    Postcentral,
    Parietal,
    Occipital,
}

impl Area {
    pub const ALL: [Area; 8] = [
        Area::Prefrontal,
        Area::Frontal,
        Area::LeftTemporal,
        Area::RightTemporal,
        Area::Precentral,
        Area::Postcentral,
        Area::Parietal,
        Area::Occipital,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Area::Prefrontal => "prefrontal",
            Area::Frontal => "frontal",
            Area::LeftTemporal => "left_temporal",
            Area::RightTemporal => "right_temporal",
            Area::Precentral => "precentral",
            Area::Postcentral => "postcentral",
            Area::Parietal => "parietal",
            Area::Occipital => "occipital",
        }
    }

    pub fn from_name(name: &str) -> Option<Area> {
        Area::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Default assignment by 10-10 label: the letter prefix picks the row,
    /// odd/even numbering picks the hemisphere for temporal sites, and `z`
    /// (midline) sites follow their row.
    pub fn from_label(label: &str) -> Option<Area> {
        let split = label
            .find(|c: char| c.is_ascii_digit() || c == 'z' || c == 'Z')
            .unwrap_or(label.len());
        let (prefix, rest) = label.split_at(split);
        let side = if rest.eq_ignore_ascii_case("z") {
            None
        } else {
            Some(rest.parse::<u32>().ok()? % 2 == 1)
        };
        let area = match prefix.to_ascii_uppercase().as_str() {
            "FP" | "AF" => Area::Prefrontal,
            "F" => Area::Frontal,
            "FT" | "T" | "TP" => match side? {
                true => Area::LeftTemporal,
                false => Area::RightTemporal,
            },
            "FC" => Area::Precentral,
            "C" => Area::Postcentral,
            "CP" | "P" => Area::Parietal,
            "PO" | "O" | "I" => Area::Occipital,
            _ => return None,
        };
        Some(area)
    }
}

/// Assignment of every channel of a layout to one of the eight fine areas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AreaMap {
    areas: Vec<Area>,
}

impl AreaMap {
    /// Default assignment from label prefixes.
    pub fn from_labels(layout: &ChannelLayout) -> Result<Self> {
        let areas = layout
            .labels()
            .iter()
            .map(|l| {
                Area::from_label(l)
                    .ok_or_else(|| Error::Layout(format!("no region rule for channel {l}")))
            })
            .collect::<Result<_>>()?;
        Ok(AreaMap { areas })
    }

    /// Reads a `label<TAB>area` table (fine areas). Every layout channel must be
    /// listed exactly once.
    pub fn parse(text: &str, layout: &ChannelLayout) -> Result<Self> {
        let mut by_label = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut f = line.split_whitespace();
            let (Some(label), Some(region), None) = (f.next(), f.next(), f.next()) else {
                return Err(Error::Layout(format!(
                    "line {}: expected label<TAB>region",
                    lineno + 1
                )));
            };
            if label == "label" && region == "region" {
                continue;
            }
            let area = Area::from_name(region).ok_or_else(|| {
                Error::Layout(format!("line {}: unknown region {region:?}", lineno + 1))
            })?;
            if by_label.insert(label.to_string(), area).is_some() {
                return Err(Error::Layout(format!("channel {label} assigned twice")));
            }
        }
        let areas = layout
            .labels()
            .iter()
            .map(|l| {
                by_label
                    .remove(l)
                    .ok_or_else(|| Error::Layout(format!("no region for channel {l}")))
            })
            .collect::<Result<_>>()?;
        if let Some(extra) = by_label.keys().next() {
            return Err(Error::Layout(format!("channel {extra} is not in the layout")));
        }
        Ok(AreaMap { areas })
    }

    pub fn area(&self, channel: usize) -> Area {
        self.areas[channel]
    }
}

/// Channels grouped into M regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    pub config: PartitionConfig,
    names: Vec<String>,
    /// Layout row indices per region, in layout order.
    members: Vec<Vec<usize>>,
    labels: Vec<String>,
    n_channels: usize,
}

impl RegionPartition {
    /// Partition with the default label-prefix assignment.
    pub fn build(layout: &ChannelLayout, config: PartitionConfig) -> Result<Self> {
        Self::from_area_map(layout, &AreaMap::from_labels(layout)?, config)
    }

    pub fn from_area_map(
        layout: &ChannelLayout,
        areas: &AreaMap,
        config: PartitionConfig,
    ) -> Result<Self> {
        let mut names = Vec::new();
        let mut members = Vec::new();
        for (name, group) in config.groups() {
            let rows: Vec<usize> = (0..layout.n_channels())
                .filter(|&c| group.contains(&areas.area(c)))
                .collect();
            if rows.is_empty() {
                return Err(Error::Layout(format!(
                    "{config}: region {name} has no channels in this layout"
                )));
            }
            names.push(name.to_string());
            members.push(rows);
        }
        Ok(RegionPartition {
            config,
            names,
            members,
            labels: layout.labels().to_vec(),
            n_channels: layout.n_channels(),
        })
    }

    /// Reads a partition table: `# config: <id>`, `# regions: a,b,...`, then
    /// `label<TAB>region` rows. Channels not listed are dropped, which is only
    /// allowed for the non-covering configurations.
    pub fn parse(text: &str, layout: &ChannelLayout) -> Result<Self> {
        let mut config = None;
        let mut names: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                let c = c.trim();
                if let Some(v) = c.strip_prefix("config:") {
                    config = Some(v.trim().parse::<PartitionConfig>()?);
                } else if let Some(v) = c.strip_prefix("regions:") {
                    names = Some(v.split(',').map(|s| s.trim().to_string()).collect());
                }
                continue;
            }
            let mut f = line.split_whitespace();
            let (Some(label), Some(region), None) = (f.next(), f.next(), f.next()) else {
                return Err(Error::Layout(format!(
                    "line {}: expected label<TAB>region",
                    lineno + 1
                )));
            };
            if label == "label" && region == "region" {
                continue;
            }
            rows.push((label.to_string(), region.to_string()));
        }
        let config =
            config.ok_or_else(|| Error::Layout("partition asset lacks `# config:`".into()))?;
        let names =
            names.ok_or_else(|| Error::Layout("partition asset lacks `# regions:`".into()))?;
        if names.len() != config.m() {
            return Err(Error::Layout(format!(
                "{config} needs {} regions, asset names {}",
                config.m(),
                names.len()
            )));
        }
        let mut members = vec![Vec::new(); names.len()];
        let mut seen = HashSet::new();
        for (label, region) in rows {
            let c = layout
                .index_of(&label)
                .ok_or_else(|| Error::Layout(format!("channel {label} is not in the layout")))?;
            if !seen.insert(c) {
                return Err(Error::Layout(format!("channel {label} assigned twice")));
            }
            let r = names
                .iter()
                .position(|n| *n == region)
                .ok_or_else(|| Error::Layout(format!("unknown region {region:?}")))?;
            members[r].push(c);
        }
        if config.is_full_cover() && seen.len() != layout.n_channels() {
            let missing = (0..layout.n_channels()).find(|c| !seen.contains(c)).unwrap();
            return Err(Error::Layout(format!(
                "{config} must cover every channel; {} has no region",
                layout.labels()[missing]
            )));
        }
        for (name, m) in names.iter().zip(&mut members) {
            if m.is_empty() {
                return Err(Error::Layout(format!("region {name} is empty")));
            }
            m.sort_unstable();
        }
        Ok(RegionPartition {
            config,
            names,
            members,
            labels: layout.labels().to_vec(),
            n_channels: layout.n_channels(),
        })
    }

    /// Text form readable by [`RegionPartition::parse`].
    pub fn to_asset(&self) -> String {
        let mut out = format!(
            "# config: {}\n# regions: {}\nlabel\tregion\n",
            self.config,
            self.names.join(",")
        );
        for (name, rows) in self.names.iter().zip(&self.members) {
            for &c in rows {
                out.push_str(&format!("{}\t{}\n", self.labels[c], name));
            }
        }
        out
    }

    pub fn m(&self) -> usize {
        self.members.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    /// Channel count of each region.
    pub fn region_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Channel count the partition expects in its input.
    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn channel_labels(&self, region: usize) -> Vec<&str> {
        self.members[region]
            .iter()
            .map(|&c| self.labels[c].as_str())
            .collect()
    }

    /// Region index of a layout row, if kept.
    pub fn region_of(&self, channel: usize) -> Option<usize> {
        self.members.iter().position(|m| m.contains(&channel))
    }

    /// Splits a channels × samples segment into per-region blocks.
    pub fn apply(&self, trial: &EegTrial) -> Result<Vec<Tensor<f32>>> {
        if trial.n_channels() != self.n_channels {
            return Err(Error::Shape(format!(
                "partition expects {} channels, segment has {}",
                self.n_channels,
                trial.n_channels()
            )));
        }
        self.members
            .iter()
            .map(|rows| {
                let block = trial.select_channels(rows)?;
                Tensor::new(
                    vec![block.n_channels(), block.n_samples()],
                    block.data().to_vec(),
                )
            })
            .collect()
    }
}
