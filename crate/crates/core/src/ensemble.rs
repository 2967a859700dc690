//! Streaming modal-confidence adjustment and the cross-modal ensemble.
//!
//! Each modality's confidence is min-max normalized against the extrema of
//! that modality's confidences seen so far, including the current sample.
//! The adjusted confidences weight the two distributions:
//! `p_ens = adj_img * p_img + adj_txt * p_txt`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{argmax, Prediction};

/// Below this spread a modality's range is treated as degenerate.
pub const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// Min-max adjusted confidences.
    #[default]
    Modal,
    /// Both weights fixed at 1.
    Equal,
    /// Unadjusted confidences used directly as weights.
    Raw,
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMode::Modal => "modal",
            EnsembleMode::Equal => "equal",
            EnsembleMode::Raw => "raw",
        })
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modal" => Ok(EnsembleMode::Modal),
            "equal" => Ok(EnsembleMode::Equal),
            "raw" => Ok(EnsembleMode::Raw),
            other => Err(Error::InvalidConfig(format!(
                "unknown ensemble mode {other:?} (expected modal, equal or raw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Extrema {
    min: f64,
    max: f64,
}

impl Extrema {
    fn include(this: &mut Option<Extrema>, x: f64) -> Extrema {
        let e = match *this {
            None => Extrema { min: x, max: x },
            Some(e) => Extrema {
                min: e.min.min(x),
                max: e.max.max(x),
            },
        };
        *this = Some(e);
        e
    }

    fn scale(&self, x: f64) -> f64 {
        let spread = self.max - self.min;
        if spread < DEGENERATE_RANGE {
            1.0
        } else {
            (x - self.min) / spread
        }
    }
}

/// Running per-modality confidence extrema for one test stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnsembleState {
    t: u64,
    img: Option<Extrema>,
    txt: Option<Extrema>,
}

/// JSON snapshot layout; extrema are `null` before the first step.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    t: u64,
    img_min: Option<f64>,
    img_max: Option<f64>,
    txt_min: Option<f64>,
    txt_max: Option<f64>,
}

impl Serialize for EnsembleState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        Snapshot {
            t: self.t,
            img_min: self.img.map(|e| e.min),
            img_max: self.img.map(|e| e.max),
            txt_min: self.txt.map(|e| e.min),
            txt_max: self.txt.map(|e| e.max),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EnsembleState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let snap = Snapshot::deserialize(d)?;
        EnsembleState::from_snapshot(snap).map_err(serde::de::Error::custom)
    }
}

impl EnsembleState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn img_range(&self) -> Option<(f64, f64)> {
        self.img.map(|e| (e.min, e.max))
    }

    pub fn txt_range(&self) -> Option<(f64, f64)> {
        self.txt.map(|e| (e.min, e.max))
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    fn from_snapshot(s: Snapshot) -> Result<Self> {
        fn pair(min: Option<f64>, max: Option<f64>, which: &str) -> Result<Option<Extrema>> {
            match (min, max) {
                (None, None) => Ok(None),
                (Some(min), Some(max)) if min.is_finite() && max.is_finite() && min <= max => {
                    Ok(Some(Extrema { min, max }))
                }
                _ => Err(Error::InvalidState(format!("inconsistent {which} extrema"))),
            }
        }
        let img = pair(s.img_min, s.img_max, "img")?;
        let txt = pair(s.txt_min, s.txt_max, "txt")?;
        if (s.t == 0) != img.is_none() || img.is_none() != txt.is_none() {
            return Err(Error::InvalidState(
                "extrema must be present exactly when t > 0".into(),
            ));
        }
        Ok(Self { t: s.t, img, txt })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Snapshot =
            serde_json::from_str(text).map_err(|e| Error::InvalidState(e.to_string()))?;
        Self::from_snapshot(snap)
    }

    /// Advances the stream by one sample and returns the weights for it.
    /// Extrema always advance, whatever the mode.
    pub fn adjust(&mut self, alpha_img: f64, alpha_txt: f64, mode: EnsembleMode) -> (f64, f64) {
        let img = Extrema::include(&mut self.img, alpha_img);
        let txt = Extrema::include(&mut self.txt, alpha_txt);
        self.t += 1;
        match mode {
            EnsembleMode::Modal => (img.scale(alpha_img), txt.scale(alpha_txt)),
            EnsembleMode::Equal => (1.0, 1.0),
            EnsembleMode::Raw => (alpha_img, alpha_txt),
        }
    }

    pub fn step(
        &mut self,
        p_img: &Prediction,
        p_txt: &Prediction,
        mode: EnsembleMode,
    ) -> Result<EnsembleOutput> {
        if p_img.num_classes() != p_txt.num_classes() {
            return Err(Error::ClassCountMismatch(
                p_img.num_classes(),
                p_txt.num_classes(),
            ));
        }
        let (adj_img, adj_txt) = self.adjust(p_img.confidence, p_txt.confidence, mode);
        Ok(EnsembleOutput::combine(
            adj_img,
            &p_img.probs,
            adj_txt,
            &p_txt.probs,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub p_ens: Vec<f64>,
    pub adj_img: f64,
    pub adj_txt: f64,
    pub predicted_class: usize,
}

impl EnsembleOutput {
    /// Weighted sum of two equally sized distributions. Not renormalized.
    pub fn combine(adj_img: f64, p_img: &[f64], adj_txt: f64, p_txt: &[f64]) -> Self {
        debug_assert_eq!(p_img.len(), p_txt.len());
        let p_ens: Vec<f64> = p_img
            .iter()
            .zip(p_txt)
            .map(|(a, b)| adj_img * a + adj_txt * b)
            .collect();
        let predicted_class = argmax(&p_ens);
        Self {
            p_ens,
            adj_img,
            adj_txt,
            predicted_class,
        }
    }
}
