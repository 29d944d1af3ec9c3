//! sRGB → CIE XYZ → CIELAB conversion of input frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear sRGB → XYZ matrix.
pub const RGB_TO_XYZ: [[f32; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

const LINEAR_KNEE: f32 = 0.04045;
const LAB_KNEE: f32 = 0.008856;

/// Reference white tristimulus values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WhitePoint {
    pub xn: f32,
    pub yn: f32,
    pub zn: f32,
}

impl WhitePoint {
    pub fn new(xn: f32, yn: f32, zn: f32) -> Result<Self> {
        if !(xn > 0.0 && yn > 0.0 && zn > 0.0) {
            return Err(Error::Range(format!("white point must be positive: ({xn}, {yn}, {zn})")));
        }
        Ok(Self { xn, yn, zn })
    }

    /// D65 as implied by the conversion matrix: the image of linear white.
    pub fn d65() -> Self {
        let [xn, yn, zn] = rgb_to_xyz([1.0, 1.0, 1.0]);
        Self { xn, yn, zn }
    }
}

impl Default for WhitePoint {
    fn default() -> Self {
        Self::d65()
    }
}

/// One CIELAB pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lab {
    pub l: f32,
    pub a: f32,
    pub b: f32,
}

/// Planar CIELAB image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

/// How LAB values are rescaled before they are fed to the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabScaling {
    /// `L/100`, `A/128`, `B/128`, clamped to [−1, 1]. Black maps to zero.
    #[default]
    Centered,
    /// `L/100`, `(A+128)/256`, `(B+128)/256`, clamped to [0, 1].
    Offset,
}

impl LabScaling {
    pub fn apply(self, lab: Lab) -> [f32; 3] {
        let l = (lab.l / 100.0).clamp(0.0, 1.0);
        match self {
            LabScaling::Centered => [l, (lab.a / 128.0).clamp(-1.0, 1.0), (lab.b / 128.0).clamp(-1.0, 1.0)],
            LabScaling::Offset => [
                l,
                ((lab.a + 128.0) / 256.0).clamp(0.0, 1.0),
                ((lab.b + 128.0) / 256.0).clamp(0.0, 1.0),
            ],
        }
    }
}

/// Gamma expansion of one sRGB channel value in [0, 1].
pub fn srgb_linearize(c: f32) -> Result<f32> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Range(format!("sRGB channel value {c} outside [0,1]")));
    }
    Ok(linearize_unchecked(c))
}

fn linearize_unchecked(c: f32) -> f32 {
    if c <= LINEAR_KNEE {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn rgb_to_xyz(rgb: [f32; 3]) -> [f32; 3] {
    let m = &RGB_TO_XYZ;
    [0, 1, 2].map(|r| m[r][0] * rgb[0] + m[r][1] * rgb[1] + m[r][2] * rgb[2])
}

/// The CIELAB companding function.
pub fn lab_f(u: f32) -> f32 {
    if u > LAB_KNEE {
        u.cbrt()
    } else {
        7.787 * u + 4.0 / 29.0
    }
}

pub fn xyz_to_lab(xyz: [f32; 3], white: &WhitePoint) -> Lab {
    let fx = lab_f(xyz[0] / white.xn);
    let fy = lab_f(xyz[1] / white.yn);
    let fz = lab_f(xyz[2] / white.zn);
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// Gamma-encoded sRGB pixel → LAB.
pub fn srgb_to_lab(rgb: [f32; 3], white: &WhitePoint) -> Result<Lab> {
    let lin = [srgb_linearize(rgb[0])?, srgb_linearize(rgb[1])?, srgb_linearize(rgb[2])?];
    Ok(xyz_to_lab(rgb_to_xyz(lin), white))
}

/// Converts a planar `3×H×W` sRGB image.
pub fn rgb_image_to_lab(image: &Tensor, white: &WhitePoint) -> Result<LabImage> {
    let &[3, height, width] = image.shape() else {
        return Err(Error::shape("rgb_to_lab", format!("expected 3×H×W, got {:?}", image.shape())));
    };
    let plane = height * width;
    let d = image.data();
    let mut out = LabImage {
        height,
        width,
        l: Vec::with_capacity(plane),
        a: Vec::with_capacity(plane),
        b: Vec::with_capacity(plane),
    };
    for i in 0..plane {
        let lab = srgb_to_lab([d[i], d[plane + i], d[2 * plane + i]], white)?;
        out.l.push(lab.l);
        out.a.push(lab.a);
        out.b.push(lab.b);
    }
    Ok(out)
}

/// Frame-wise conversion of a `[frames, 3, H, W]` sRGB sequence to scaled
/// LAB channels of the same shape.
pub fn rgb_to_lab_sequence(seq: &Tensor, scaling: LabScaling) -> Result<Tensor> {
    let &[frames, 3, h, w] = seq.shape() else {
        return Err(Error::shape("rgb_to_lab_sequence", format!("expected F×3×H×W, got {:?}", seq.shape())));
    };
    let white = WhitePoint::d65();
    let plane = h * w;
    let mut out = vec![0.0f32; seq.numel()];
    for f in 0..frames {
        let src = &seq.data()[f * 3 * plane..(f + 1) * 3 * plane];
        let dst = &mut out[f * 3 * plane..(f + 1) * 3 * plane];
        for i in 0..plane {
            let lab = srgb_to_lab([src[i], src[plane + i], src[2 * plane + i]], &white)?;
            let [l, a, b] = scaling.apply(lab);
            dst[i] = l;
            dst[plane + i] = a;
            dst[2 * plane + i] = b;
        }
    }
    Tensor::new(seq.shape().to_vec(), out)
}
