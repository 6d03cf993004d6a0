//! Gaussian primitives, scenes, and the 3DGS binary PLY convention.
//!
//! Stored PLY values follow the de facto 3DGS layout: opacity is a logit,
//! scales are log semi-axes, color is the degree-0 SH coefficient and the
//! rotation quaternion is `(w, x, y, z)` in `rot_0..rot_3`.

use crate::error::{Error, Result};
use crate::geometry::Pose3;
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Degree-0 real spherical harmonic constant.
pub const SH_C0: f64 = 0.282_094_791_8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// 1-sigma semi-axes, strictly positive.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mean,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(sigma),
            opacity,
            color,
        }
    }

    /// `R diag(scale^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let d = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * d * r.transpose()
    }

    /// `R diag(1/scale^2) R^T`, the quadratic form of the 1-sigma ellipsoid.
    pub fn precision(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let inv = self.scale.map(|s| 1.0 / (s * s));
        r * Matrix3::from_diagonal(&inv) * r.transpose()
    }

    /// Half extents of the axis-aligned box around the 1-sigma ellipsoid.
    pub fn aabb_half_extent(&self) -> Vector3<f64> {
        let c = self.covariance();
        Vector3::new(c[(0, 0)].sqrt(), c[(1, 1)].sqrt(), c[(2, 2)].sqrt())
    }

    pub fn covariance_trace(&self) -> f64 {
        self.scale.norm_squared()
    }

    fn validate(&self, index: usize) -> Result<()> {
        let finite = self.mean.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.rotation.coords.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                index,
                field: "primitive".into(),
            });
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "primitive {index} has non-positive scale"
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidParameter(format!(
                "primitive {index} has opacity outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Spherical-harmonics handling when reading PLY colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ShMode {
    /// Only `f_dc_*` is used, `f_rest_*` is parsed and dropped.
    #[default]
    DcOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub ground_z: f64,
    pub name: String,
}

/// An immutable splat scene in a gravity-aligned metric frame (+z up).
#[derive(Debug, Clone)]
pub struct SplatScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub ground_z: f64,
    pub name: String,
}

impl SplatScene {
    pub fn new(primitives: Vec<GaussianPrimitive>, ground_z: f64, name: impl Into<String>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::EmptyScene);
        }
        for (i, p) in primitives.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(Self {
            primitives,
            ground_z,
            name: name.into(),
        })
    }

    /// Up axis of the world frame, always +z.
    pub fn up_axis(&self) -> Vector3<f64> {
        Vector3::z()
    }
}

/// Path of the metadata sidecar: `scene.ply` -> `scene.meta.json`.
pub fn sidecar_path(ply: &Path) -> PathBuf {
    ply.with_extension("meta.json")
}

/// Loads a scene PLY together with its `.meta.json` sidecar.
pub fn load_scene(path: impl AsRef<Path>, sh_mode: ShMode) -> Result<SplatScene> {
    let path = path.as_ref();
    let primitives = read_ply(path, sh_mode)?;
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io_at(&meta_path, e))?;
    let meta: SceneMeta = serde_json::from_str(&meta_text)?;
    SplatScene::new(primitives, meta.ground_z, meta.name)
}

/// Writes the scene PLY and its sidecar.
pub fn save_scene(scene: &SplatScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_ply(path, &scene.primitives)?;
    let meta = SceneMeta {
        ground_z: scene.ground_z,
        name: scene.name.clone(),
    };
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io_at(&meta_path, e))
}

/// Rigidly moves primitives: means by the full pose, orientations are
/// left-multiplied by the pose rotation. Everything else is untouched.
pub fn transform_primitives(prims: &[GaussianPrimitive], pose: &Pose3) -> Vec<GaussianPrimitive> {
    if *pose == Pose3::identity() {
        return prims.to_vec();
    }
    prims
        .iter()
        .map(|p| GaussianPrimitive {
            mean: pose.transform_point(&p.mean.into()).coords,
            rotation: pose.rotation * p.rotation,
            ..p.clone()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<(String, ScalarType)>,
}

impl PlyElement {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, t)| t.size()).sum()
    }
}

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

fn parse_header(bytes: &[u8]) -> Result<(Vec<PlyElement>, usize)> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("PLY header has no end_header line".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("PLY header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Format("missing `ply` magic".into()));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => {
                return Err(Error::Format(format!("unsupported PLY format `{other}`")));
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Format(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                return Err(Error::Format("list properties are not supported".into()));
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty).ok_or_else(|| Error::Format(format!("unknown property type `{ty}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before any element".into()))?
                    .props
                    .push((name.to_string(), ty));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(Error::Format(format!("unrecognized header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(Error::Format("missing format line".into()));
    }
    Ok((elements, end + END.len()))
}

/// Reads the vertex element of a 3DGS binary little-endian PLY.
pub fn read_ply(path: impl AsRef<Path>, sh_mode: ShMode) -> Result<Vec<GaussianPrimitive>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    parse_ply(&bytes, sh_mode)
}

/// Parses PLY bytes; see [`read_ply`].
pub fn parse_ply(bytes: &[u8], _sh_mode: ShMode) -> Result<Vec<GaussianPrimitive>> {
    let (elements, mut offset) = parse_header(bytes)?;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        offset += el.count * el.stride();
    }
    let vertex = vertex.ok_or_else(|| Error::Format("no vertex element".into()))?;

    let mut columns = [(0usize, ScalarType::F32); REQUIRED.len()];
    for (slot, field) in columns.iter_mut().zip(REQUIRED) {
        let mut off = 0;
        let mut found = None;
        for (name, ty) in &vertex.props {
            if name == field {
                found = Some((off, *ty));
                break;
            }
            off += ty.size();
        }
        *slot = found.ok_or_else(|| Error::MissingField(field.to_string()))?;
    }
    if vertex.count == 0 {
        return Err(Error::EmptyScene);
    }
    let stride = vertex.stride();
    let needed = offset + vertex.count * stride;
    if bytes.len() < needed {
        return Err(Error::Format(format!(
            "truncated vertex data: need {needed} bytes, have {}",
            bytes.len()
        )));
    }

    let mut out = Vec::with_capacity(vertex.count);
    let mut vals = [0.0f64; REQUIRED.len()];
    for i in 0..vertex.count {
        let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
        for (k, (off, ty)) in columns.iter().enumerate() {
            let v = ty.read(&row[*off..]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    index: i,
                    field: REQUIRED[k].to_string(),
                });
            }
            vals[k] = v;
        }
        let q = Quaternion::new(vals[10], vals[11], vals[12], vals[13]);
        if q.norm() == 0.0 {
            return Err(Error::Format(format!("zero quaternion at vertex {i}")));
        }
        let color = Vector3::new(vals[3], vals[4], vals[5]).map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0));
        out.push(GaussianPrimitive {
            mean: Vector3::new(vals[0], vals[1], vals[2]),
            rotation: UnitQuaternion::from_quaternion(q),
            scale: Vector3::new(vals[7].exp(), vals[8].exp(), vals[9].exp()),
            opacity: logistic(vals[6]),
            color,
        });
        if out[i].scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::NonFinite {
                index: i,
                field: "scale".into(),
            });
        }
    }
    Ok(out)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    // opacities of exactly 0 or 1 have no finite logit
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

/// Writes primitives in the 3DGS PLY layout (float32, with zero normals).
pub fn write_ply(path: impl AsRef<Path>, prims: &[GaussianPrimitive]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply_to(&mut w, prims).map_err(|e| Error::io_at(path, e))?;
    w.flush().map_err(|e| Error::io_at(path, e))
}

pub fn write_ply_to<W: Write>(w: &mut W, prims: &[GaussianPrimitive]) -> std::io::Result<()> {
    let fields = [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
        "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    ];
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", prims.len())?;
    for f in fields {
        writeln!(w, "property float {f}")?;
    }
    writeln!(w, "end_header")?;
    for p in prims {
        let q = p.rotation.quaternion();
        let dc = p.color.map(|c| (c - 0.5) / SH_C0);
        let row = [
            p.mean.x,
            p.mean.y,
            p.mean.z,
            0.0,
            0.0,
            0.0,
            dc.x,
            dc.y,
            dc.z,
            logit(p.opacity),
            p.scale.x.ln(),
            p.scale.y.ln(),
            p.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
        ];
        for v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Translation3;
    use proptest::prelude::*;

    fn ply_bytes(props: &[&str], rows: &[Vec<f32>]) -> Vec<u8> {
        let mut s = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", rows.len());
        for p in props {
            s.push_str(&format!("property float {p}\n"));
        }
        s.push_str("end_header\n");
        let mut b = s.into_bytes();
        for r in rows {
            for v in r {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    fn zero_row() -> Vec<f32> {
        let mut r = vec![0.0f32; 14];
        r[10] = 1.0;
        r
    }

    #[test]
    fn logistic_and_exp_decoding() {
        let b = ply_bytes(&REQUIRED, &[zero_row()]);
        let p = parse_ply(&b, ShMode::DcOnly).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].opacity, 0.5);
        assert_eq!(p[0].scale, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(p[0].color, Vector3::repeat(0.5));
    }

    #[test]
    fn missing_field_is_named() {
        let props: Vec<&str> = REQUIRED.iter().copied().filter(|f| *f != "scale_1").collect();
        let b = ply_bytes(&props, &[vec![0.0; 13]]);
        match parse_ply(&b, ShMode::DcOnly) {
            Err(Error::MissingField(f)) => assert_eq!(f, "scale_1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_vertices_is_empty_scene() {
        let b = ply_bytes(&REQUIRED, &[]);
        assert!(matches!(parse_ply(&b, ShMode::DcOnly), Err(Error::EmptyScene)));
    }

    #[test]
    fn non_finite_reports_index() {
        let mut bad = zero_row();
        bad[6] = f32::NAN;
        let b = ply_bytes(&REQUIRED, &[zero_row(), bad]);
        match parse_ply(&b, ShMode::DcOnly) {
            Err(Error::NonFinite { index, field }) => {
                assert_eq!(index, 1);
                assert_eq!(field, "opacity");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rest_coefficients_are_ignored_and_quaternion_normalized() {
        let mut props: Vec<&str> = REQUIRED.to_vec();
        props.insert(6, "f_rest_0");
        props.push("f_rest_1");
        let mut row = zero_row();
        row[10] = 2.0; // unnormalized w
        row.insert(6, 9.0);
        row.push(-9.0);
        let p = parse_ply(&ply_bytes(&props, &[row]), ShMode::DcOnly).unwrap();
        assert!((p[0].rotation.quaternion().norm() - 1.0).abs() < 1e-12);
        assert_eq!(p[0].color, Vector3::repeat(0.5));
    }

    #[test]
    fn ascii_format_rejected() {
        let b = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n".to_vec();
        assert!(matches!(parse_ply(&b, ShMode::DcOnly), Err(Error::Format(_))));
    }

    #[test]
    fn identity_transform_is_bitwise_identity() {
        let p = vec![GaussianPrimitive {
            mean: Vector3::new(-0.0, 1.5, 3.0),
            rotation: UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            scale: Vector3::new(0.1, 0.2, 0.3),
            opacity: 0.7,
            color: Vector3::new(0.1, 0.2, 0.3),
        }];
        let q = transform_primitives(&p, &Pose3::identity());
        assert_eq!(p, q);
        assert_eq!(q[0].mean.x.to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn translation_shifts_means_only() {
        let p = vec![GaussianPrimitive::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.1, 0.5, Vector3::zeros())];
        let pose = Pose3::from_parts(Translation3::new(1.0, 0.0, 0.0), UnitQuaternion::identity());
        let q = transform_primitives(&p, &pose);
        assert_eq!(q[0].mean, Vector3::new(2.0, 2.0, 3.0));
        assert_eq!(q[0].rotation, p[0].rotation);
        assert_eq!(q[0].scale, p[0].scale);
    }

    fn arb_pose() -> impl Strategy<Value = Pose3> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(-3.0f64..3.0),
        )
            .prop_map(|(t, r)| {
                Pose3::from_parts(
                    Translation3::new(t[0], t[1], t[2]),
                    UnitQuaternion::from_scaled_axis(Vector3::new(r[0], r[1], r[2])),
                )
            })
    }

    fn arb_prim() -> impl Strategy<Value = GaussianPrimitive> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(0.01f64..1.0),
            0.0f64..1.0,
        )
            .prop_map(|(m, r, s, o)| GaussianPrimitive {
                mean: Vector3::from(m),
                rotation: UnitQuaternion::from_scaled_axis(Vector3::from(r)),
                scale: Vector3::from(s),
                opacity: o,
                color: Vector3::new(0.2, 0.4, 0.6),
            })
    }

    proptest! {
        #[test]
        fn composition_matches_sequential(prims in prop::collection::vec(arb_prim(), 1..8), a in arb_pose(), b in arb_pose()) {
            let once = transform_primitives(&prims, &(a * b));
            let twice = transform_primitives(&transform_primitives(&prims, &b), &a);
            for (p, q) in once.iter().zip(&twice) {
                prop_assert!((p.mean - q.mean).norm() < 1e-9);
                prop_assert!(p.rotation.angle_to(&q.rotation) < 1e-9);
            }
        }

        #[test]
        fn isometry_and_covariance_rotation(prims in prop::collection::vec(arb_prim(), 2..8), pose in arb_pose()) {
            let moved = transform_primitives(&prims, &pose);
            let r = pose.rotation.to_rotation_matrix().into_inner();
            for i in 0..prims.len() {
                let expected = r * prims[i].covariance() * r.transpose();
                prop_assert!((moved[i].covariance() - expected).abs().max() < 1e-9);
                for j in 0..prims.len() {
                    let d0 = (prims[i].mean - prims[j].mean).norm();
                    let d1 = (moved[i].mean - moved[j].mean).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn save_load_round_trip(prims in prop::collection::vec(arb_prim(), 1..6)) {
            let mut buf = Vec::new();
            write_ply_to(&mut buf, &prims).unwrap();
            let back = parse_ply(&buf, ShMode::DcOnly).unwrap();
            prop_assert_eq!(back.len(), prims.len());
            for (a, b) in prims.iter().zip(&back) {
                let f32_eps = 1e-6 * (1.0 + a.mean.norm());
                prop_assert!((a.mean - b.mean).norm() < 4.0 * f32_eps);
                prop_assert!(((a.scale - b.scale).component_div(&a.scale)).norm() < 1e-5);
                prop_assert!((a.opacity.clamp(1e-7, 1.0 - 1e-7) - b.opacity).abs() < 1e-5);
                prop_assert!((a.color - b.color).norm() < 1e-5);
                prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-5);
            }
        }
    }
}
