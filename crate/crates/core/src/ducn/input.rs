use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::edt::DistanceMap;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::ntf;
use crate::phantom::ClassLabel;
use crate::tensor::Tensor;

/// Input-channel substitution rules for the ablation study. `Up` keeps the
/// full input and changes only how the network is initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Lung mask removed: every channel is the raw image.
    #[serde(rename = "LMR")]
    Lmr,
    /// Distance map removed: replaced by the lung image.
    #[serde(rename = "DMR")]
    Dmr,
    /// Raw image removed: replaced by the lung image.
    #[serde(rename = "RIR")]
    Rir,
    /// Untrained (not pretrained) initialization.
    #[serde(rename = "UP")]
    Up,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::Lmr,
        AblationMode::Dmr,
        AblationMode::Rir,
        AblationMode::Up,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::Lmr => "LMR",
            AblationMode::Dmr => "DMR",
            AblationMode::Rir => "RIR",
            AblationMode::Up => "UP",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?} (expected full, LMR, DMR, RIR or UP)")))
    }
}

/// The 3-channel network input of one slice, `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack {
    pub channels: Tensor,
    pub mode: AblationMode,
    /// `patient/scan/slice` of the source record.
    pub source: String,
    /// Unknown for images outside a labelled manifest.
    pub label: Option<ClassLabel>,
}

impl InputStack {
    pub fn height(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[2]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height() * self.width();
        &self.channels.data()[c * plane..(c + 1) * plane]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ntf::write_f32(path, &self.channels)
    }

    pub fn load(path: &Path, mode: AblationMode, source: String, label: Option<ClassLabel>) -> Result<Self> {
        let channels = ntf::read_f32(path)?;
        if channels.shape().len() != 3 || channels.shape()[0] != 3 {
            return Err(Error::format(path, format!("expected a [3, H, W] tensor, got {:?}", channels.shape())));
        }
        Ok(Self {
            channels,
            mode,
            source,
            label,
        })
    }
}

/// Stacks (lung image, raw image, distance map) with the mode's substitutions.
pub fn compose_input_stack(
    raw: &Image,
    mask: &Mask,
    dmap: &DistanceMap,
    mode: AblationMode,
    source: String,
    label: Option<ClassLabel>,
) -> Result<InputStack> {
    let (h, w) = (raw.height, raw.width);
    if (mask.height, mask.width) != (h, w) || (dmap.height, dmap.width) != (h, w) {
        return Err(Error::Domain(format!(
            "channel shapes differ: image {h}×{w}, mask {}×{}, distance map {}×{}",
            mask.height, mask.width, dmap.height, dmap.width
        )));
    }
    if !dmap.normalized {
        return Err(Error::Domain("distance map must be normalized before stacking".into()));
    }
    let lung: Vec<f32> = raw.data.iter().zip(&mask.data).map(|(&v, &m)| v * f32::from(m)).collect();
    let raw = &raw.data;
    let planes: [&[f32]; 3] = match mode {
        AblationMode::Full | AblationMode::Up => [&lung, raw, &dmap.values],
        AblationMode::Lmr => [raw, raw, raw],
        AblationMode::Dmr => [&lung, raw, &lung],
        AblationMode::Rir => [&lung, &lung, &dmap.values],
    };
    let data = planes.concat();
    Ok(InputStack {
        channels: Tensor::new(vec![3, h, w], data)?,
        mode,
        source,
        label,
    })
}
