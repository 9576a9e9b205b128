//! Pin-hole camera geometry: projection, back-projection, bounding-box
//! reduction and azimuth extraction.
//!
//! The microphone array lies on the camera X axis with its center at the
//! camera origin, so the azimuth of a speaker is the angle between the ray
//! through its pixel and the X axis.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Calibration parameters `fx = f/dx`, `fy = f/dy` and principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

/// Normalized image-plane coordinates (unit focal length).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
}

/// A point in the camera frame: X along the array axis, Y down, Z along the
/// optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, u0: f64, v0: f64) -> Result<Self> {
        let k = Self { fx, fy, u0, v0 };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.u0.is_finite() && self.v0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "principal point must be finite (u0={}, v0={})",
                self.u0, self.v0
            )));
        }
        Ok(())
    }

    /// Parses the plain-text intrinsics format: one `key = value` pair per
    /// line for `fx`, `fy`, `u0` and `v0`. Blank lines and `#` comments are
    /// ignored; `:` is accepted in place of `=`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut vals: [Option<f64>; 4] = [None; 4];
        for (i, raw) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                })?;
            let slot = match key.trim() {
                "fx" => 0,
                "fy" => 1,
                "u0" => 2,
                "v0" => 3,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown intrinsics key `{other}`"),
                    })
                }
            };
            let v: f64 = value.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{}` is not a number", value.trim()),
            })?;
            vals[slot] = Some(v);
        }
        let get = |i: usize, name: &str| {
            vals[i].ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing key `{name}`"),
            })
        };
        Self::new(get(0, "fx")?, get(1, "fy")?, get(2, "u0")?, get(3, "v0")?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [("fx", self.fx), ("fy", self.fy), ("u0", self.u0), ("v0", self.v0)] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).at(path)
    }
}

impl CameraPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

fn finite(vals: &[f64], what: &str) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} has non-finite coordinates")))
    }
}

/// Inverse of the pixel affine map: pixel → normalized image plane.
pub fn pixel_to_image(p: PixelPoint, k: &CameraIntrinsics) -> Result<ImagePoint> {
    finite(&[p.u, p.v], "pixel point")?;
    Ok(ImagePoint {
        x: (p.u - k.u0) / k.fx,
        y: (p.v - k.v0) / k.fy,
    })
}

/// Back-projects a pixel to the unit-depth ray through it.
pub fn pixel_to_camera(p: PixelPoint, k: &CameraIntrinsics) -> Result<CameraPoint> {
    let ip = pixel_to_image(p, k)?;
    Ok(CameraPoint::new(ip.x, ip.y, 1.0))
}

pub fn camera_to_pixel(p: CameraPoint, k: &CameraIntrinsics) -> Result<PixelPoint> {
    finite(&[p.x, p.y, p.z], "camera point")?;
    if p.z <= 0.0 {
        return Err(Error::BehindCamera(p.z));
    }
    Ok(PixelPoint {
        u: k.fx * p.x / p.z + k.u0,
        v: k.fy * p.y / p.z + k.v0,
    })
}

/// The mouth proxy: midpoint of the head-and-shoulder box.
pub fn mouth_from_bbox(b: &BoundingBox) -> PixelPoint {
    PixelPoint {
        u: (b.u1 + b.u2) / 2.0,
        v: (b.v1 + b.v2) / 2.0,
    }
}

/// Angle in degrees between the ray `O_c P` and the camera X axis, in
/// `[0, 180]`.
///
/// Evaluated as `atan2(‖(Y, Z)‖, X)`, which equals `acos(X / ‖P‖)` but keeps
/// full precision near the array endfire directions.
pub fn azimuth_of(p: CameraPoint) -> Result<f64> {
    finite(&[p.x, p.y, p.z], "camera point")?;
    let lateral = p.y.hypot(p.z);
    if lateral == 0.0 && p.x == 0.0 {
        return Err(Error::InvalidArgument("azimuth of the zero vector".into()));
    }
    Ok(lateral.atan2(p.x).to_degrees())
}

/// Pixel → azimuth, the whole annotation chain for one point.
pub fn pixel_azimuth(p: PixelPoint, k: &CameraIntrinsics) -> Result<f64> {
    azimuth_of(pixel_to_camera(p, k)?)
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        finite(&[self.u1, self.v1, self.u2, self.v2], "bounding box")?;
        if self.u1 > self.u2 || self.v1 > self.v2 {
            return Err(Error::InvalidArgument(format!(
                "bounding box corners out of order: ({}, {})-({}, {})",
                self.u1, self.v1, self.u2, self.v2
            )));
        }
        Ok(())
    }

    /// Box of the given pixel size centered on `c`.
    pub fn centered(c: PixelPoint, width: f64, height: f64) -> Self {
        Self {
            u1: c.u - width / 2.0,
            v1: c.v - height / 2.0,
            u2: c.u + width / 2.0,
            v2: c.v + height / 2.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k720() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0).unwrap()
    }

    #[test]
    fn principal_point_is_on_axis() {
        let k = k720();
        let p = pixel_to_camera(PixelPoint { u: 640.0, v: 360.0 }, &k).unwrap();
        assert_eq!(p, CameraPoint::new(0.0, 0.0, 1.0));
        let p = pixel_to_camera(PixelPoint { u: 1640.0, v: 360.0 }, &k).unwrap();
        assert_eq!(p, CameraPoint::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn back_projection_worked_example() {
        let p = pixel_to_camera(PixelPoint { u: 1140.0, v: 860.0 }, &k720()).unwrap();
        assert_eq!(p, CameraPoint::new(0.5, 0.5, 1.0));
    }

    #[test]
    fn projection_examples() {
        let k = k720();
        let p = camera_to_pixel(CameraPoint::new(0.0, 0.0, 1.0), &k).unwrap();
        assert_eq!(p, PixelPoint { u: 640.0, v: 360.0 });
        let p = camera_to_pixel(CameraPoint::new(0.5, 0.5, 1.0), &k).unwrap();
        assert_eq!(p, PixelPoint { u: 1140.0, v: 860.0 });
        let p = camera_to_pixel(CameraPoint::new(1.0, 1.0, 2.0), &k).unwrap();
        assert_eq!(p, PixelPoint { u: 1140.0, v: 860.0 });
    }

    #[test]
    fn behind_camera_rejected() {
        let err = camera_to_pixel(CameraPoint::new(0.0, 0.0, -1.0), &k720()).unwrap_err();
        assert!(matches!(err, Error::BehindCamera(_)));
        assert!(camera_to_pixel(CameraPoint::new(1.0, 0.0, 0.0), &k720()).is_err());
    }

    #[test]
    fn non_finite_pixel_rejected() {
        let err = pixel_to_camera(PixelPoint { u: f64::NAN, v: 0.0 }, &k720()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn bbox_midpoints() {
        let b = BoundingBox { u1: 100.0, v1: 200.0, u2: 300.0, v2: 400.0 };
        assert_eq!(mouth_from_bbox(&b), PixelPoint { u: 200.0, v: 300.0 });
        let b = BoundingBox { u1: 7.0, v1: 9.0, u2: 7.0, v2: 9.0 };
        assert_eq!(mouth_from_bbox(&b), PixelPoint { u: 7.0, v: 9.0 });
        let b = BoundingBox { u1: 0.0, v1: 0.0, u2: 1279.0, v2: 719.0 };
        assert_eq!(mouth_from_bbox(&b), PixelPoint { u: 639.5, v: 359.5 });
        assert!(BoundingBox { u1: 2.0, v1: 0.0, u2: 1.0, v2: 1.0 }.validate().is_err());
    }

    #[test]
    fn azimuth_examples() {
        assert_abs_diff_eq!(azimuth_of(CameraPoint::new(0.0, 0.0, 1.0)).unwrap(), 90.0);
        assert_abs_diff_eq!(
            azimuth_of(CameraPoint::new(1.0, 0.0, 1.0)).unwrap(),
            45.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            azimuth_of(CameraPoint::new(1.0, 1.0, 1.0)).unwrap(),
            54.7356,
            epsilon = 1e-4
        );
        // acos(1/√3) evaluated directly
        assert_abs_diff_eq!(
            azimuth_of(CameraPoint::new(1.0, 1.0, 1.0)).unwrap(),
            (1.0 / 3f64.sqrt()).acos().to_degrees(),
            epsilon = 1e-12
        );
        assert!(azimuth_of(CameraPoint::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn intrinsics_text_round_trip() {
        let k = CameraIntrinsics::new(912.5, 911.0, 640.25, 359.75).unwrap();
        assert_eq!(CameraIntrinsics::parse(&k.to_text()).unwrap(), k);
        let parsed = CameraIntrinsics::parse("# cam\nfx: 1000\nfy=1000\n u0 = 640 \nv0 = 360\n").unwrap();
        assert_eq!(parsed, k720());
        let err = CameraIntrinsics::parse("fx = 1\nfy = abc\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(CameraIntrinsics::parse("fx = 1\nfy = 1\nu0 = 0\n").is_err());
        assert!(CameraIntrinsics::parse("fx = -1\nfy = 1\nu0 = 0\nv0 = 0").is_err());
    }

    fn intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
        (100.0..3000.0f64, 100.0..3000.0f64, 0.0..2000.0f64, 0.0..2000.0f64)
            .prop_map(|(fx, fy, u0, v0)| CameraIntrinsics { fx, fy, u0, v0 })
    }

    proptest! {
        #[test]
        fn round_trip_recovers_unit_depth_ray(
            k in intrinsics(),
            x in -10.0..10.0f64, y in -10.0..10.0f64, z in 0.05..20.0f64,
        ) {
            let p = CameraPoint::new(x, y, z);
            let back = pixel_to_camera(camera_to_pixel(p, &k).unwrap(), &k).unwrap();
            let expect = [x / z, y / z];
            for (got, want) in [back.x, back.y].into_iter().zip(expect) {
                prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
            prop_assert_eq!(back.z, 1.0);
        }

        #[test]
        fn azimuth_range_and_broadside(x in -10.0..10.0f64, y in -10.0..10.0f64, z in 0.01..10.0f64) {
            let a = azimuth_of(CameraPoint::new(x, y, z)).unwrap();
            prop_assert!((0.0..=180.0).contains(&a));
            let b = azimuth_of(CameraPoint::new(0.0, y, z)).unwrap();
            prop_assert_eq!(b, 90.0);
        }

        #[test]
        fn azimuth_depth_invariant(
            x in -10.0..10.0f64, y in -10.0..10.0f64, z in 0.01..10.0f64, alpha in 1e-3..1e3f64,
        ) {
            let a = azimuth_of(CameraPoint::new(x, y, z)).unwrap();
            let b = azimuth_of(CameraPoint::new(alpha * x, alpha * y, alpha * z)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn bbox_translation_equivariant(
            u1 in -500.0..500.0f64, v1 in -500.0..500.0f64, w in 0.0..300.0f64, h in 0.0..300.0f64,
            du in -64.0..64.0f64, dv in -64.0..64.0f64,
        ) {
            // Dyadic offsets keep the shifted corners exactly representable.
            let (du, dv) = ((du * 4.0).round() / 4.0, (dv * 4.0).round() / 4.0);
            let (u1, v1, w, h) = ((u1 * 8.0).round() / 8.0, (v1 * 8.0).round() / 8.0, (w * 8.0).round() / 8.0, (h * 8.0).round() / 8.0);
            let b = BoundingBox { u1, v1, u2: u1 + w, v2: v1 + h };
            let s = BoundingBox { u1: u1 + du, v1: v1 + dv, u2: u1 + w + du, v2: v1 + h + dv };
            let m = mouth_from_bbox(&b);
            let ms = mouth_from_bbox(&s);
            prop_assert_eq!(ms.u, m.u + du);
            prop_assert_eq!(ms.v, m.v + dv);
        }
    }
}
