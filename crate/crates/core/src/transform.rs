use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A declared spatial transformation of an input image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransformSpec {
    Identity,
    /// Counter-clockwise rotation, degrees in `[0, 360)`.
    Rotation { angle_deg: f64 },
    /// Uniform resize by `scale`; inputs use `(0, 1]`, duals of downscalings
    /// are upscalings.
    Scaling { scale: f64 },
}

impl TransformSpec {
    pub fn rotation(angle_deg: f64) -> Self {
        let a = angle_deg.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs
        let a = if a >= 360.0 { 0.0 } else { a };
        TransformSpec::Rotation { angle_deg: a }
    }

    pub fn scaling(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::config(format!("scale {scale} outside (0, 1]")));
        }
        Ok(TransformSpec::Scaling { scale })
    }

    /// The inverse spatial action.
    pub fn dual(&self) -> Self {
        match *self {
            TransformSpec::Identity => TransformSpec::Identity,
            TransformSpec::Rotation { angle_deg } => TransformSpec::rotation(360.0 - angle_deg),
            TransformSpec::Scaling { scale } => TransformSpec::Scaling { scale: 1.0 / scale },
        }
    }

    /// Number of counter-clockwise quarter turns when the spec is an exact
    /// multiple of 90 degrees.
    pub fn quarter_turns(&self) -> Option<usize> {
        match *self {
            TransformSpec::Identity => Some(0),
            TransformSpec::Rotation { angle_deg } => {
                let q = angle_deg / 90.0;
                (q == q.round()).then_some(q as usize % 4)
            }
            TransformSpec::Scaling { .. } => None,
        }
    }

    /// The lens bin serving this spec. Rotations bin by angle; only the two
    /// supported scale factors resolve.
    pub fn bin(&self) -> Option<LensBin> {
        match *self {
            TransformSpec::Identity => Some(LensBin::Identity),
            TransformSpec::Rotation { angle_deg } => Some(bin_angle(angle_deg)),
            TransformSpec::Scaling { scale } => {
                if (scale - 1.0).abs() < 1e-9 {
                    Some(LensBin::Identity)
                } else if (scale - 0.5).abs() < 1e-9 {
                    Some(LensBin::Scale2)
                } else if (scale - 1.0 / 3.0).abs() < 1e-9 {
                    Some(LensBin::Scale3)
                } else {
                    None
                }
            }
        }
    }

    pub fn angle_deg(&self) -> Option<f64> {
        match *self {
            TransformSpec::Identity => Some(0.0),
            TransformSpec::Rotation { angle_deg } => Some(angle_deg),
            TransformSpec::Scaling { .. } => None,
        }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::Identity => write!(f, "identity"),
            TransformSpec::Rotation { angle_deg } => write!(f, "rot{angle_deg}"),
            TransformSpec::Scaling { scale } => write!(f, "scale{scale}"),
        }
    }
}

/// Lens selection key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LensBin {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    Scale2,
    Scale3,
}

impl LensBin {
    pub const ROTATIONS: [LensBin; 4] = [LensBin::Identity, LensBin::Rot90, LensBin::Rot180, LensBin::Rot270];
    pub const ALL: [LensBin; 6] = [
        LensBin::Identity,
        LensBin::Rot90,
        LensBin::Rot180,
        LensBin::Rot270,
        LensBin::Scale2,
        LensBin::Scale3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LensBin::Identity => "identity",
            LensBin::Rot90 => "rot90",
            LensBin::Rot180 => "rot180",
            LensBin::Rot270 => "rot270",
            LensBin::Scale2 => "scale2",
            LensBin::Scale3 => "scale3",
        }
    }

    /// The canonical transform this bin undoes.
    pub fn spec(self) -> TransformSpec {
        match self {
            LensBin::Identity => TransformSpec::Identity,
            LensBin::Rot90 => TransformSpec::rotation(90.0),
            LensBin::Rot180 => TransformSpec::rotation(180.0),
            LensBin::Rot270 => TransformSpec::rotation(270.0),
            LensBin::Scale2 => TransformSpec::Scaling { scale: 0.5 },
            LensBin::Scale3 => TransformSpec::Scaling { scale: 1.0 / 3.0 },
        }
    }

    /// Counter-clockwise quarter turns for rotation bins.
    pub fn quarter_turns(self) -> Option<usize> {
        match self {
            LensBin::Identity => Some(0),
            LensBin::Rot90 => Some(1),
            LensBin::Rot180 => Some(2),
            LensBin::Rot270 => Some(3),
            _ => None,
        }
    }

    /// Rotation bin for a class index of the rotation classifier.
    pub fn from_rotation_class(class: usize) -> Option<LensBin> {
        LensBin::ROTATIONS.get(class).copied()
    }

    pub fn is_scaling(self) -> bool {
        matches!(self, LensBin::Scale2 | LensBin::Scale3)
    }
}

impl fmt::Display for LensBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LensBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LensBin::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::config(format!("unknown transform `{s}`")))
    }
}

/// Maps an angle (any real, reduced mod 360) onto its rotation bin:
/// `[-45, 45)` identity, `[45, 135)` rot90, `[135, 225)` rot180,
/// `[225, 315)` rot270.
pub fn bin_angle(angle_deg: f64) -> LensBin {
    let a = (angle_deg + 45.0).rem_euclid(360.0);
    match (a / 90.0).floor() as i64 {
        1 => LensBin::Rot90,
        2 => LensBin::Rot180,
        3 => LensBin::Rot270,
        _ => LensBin::Identity,
    }
}
