//! On-disk formats: flow and mask binaries, dataset directories, motion
//! lists and trajectory files.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Rotation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geometry::{CameraIntrinsics, Mat3, Pose, RelativeMotion, Vec3};
use crate::synthgen::{FlowField, Sample, ValidMask};

pub const FLOW_MAGIC: &[u8; 4] = b"UVFL";
pub const MASK_MAGIC: &[u8; 4] = b"MASK";
pub const META_FILE: &str = "meta";
pub const MOTIONS_FILE: &str = "motions.txt";
pub const FLOW_DIR: &str = "flow";

fn read_dims(r: &mut impl Read) -> Result<(usize, usize)> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let w = u32::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let h = u32::from_le_bytes(b) as usize;
    if w == 0 || h == 0 || w * h > 1 << 26 {
        return Err(Error::Format(format!("implausible dimensions {w}x{h}")));
    }
    Ok((w, h))
}

pub fn write_flow(w: &mut impl Write, flow: &FlowField) -> Result<()> {
    w.write_all(FLOW_MAGIC)?;
    w.write_all(&(flow.width as u32).to_le_bytes())?;
    w.write_all(&(flow.height as u32).to_le_bytes())?;
    for v in &flow.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_flow(r: &mut impl Read) -> Result<FlowField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FLOW_MAGIC {
        return Err(Error::Format("bad flow magic".into()));
    }
    let (w, h) = read_dims(r)?;
    let mut bytes = vec![0u8; w * h * 2 * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FlowField::from_data(w, h, data)
}

/// Row-major bits, least significant bit first within each byte.
pub fn write_mask(w: &mut impl Write, mask: &ValidMask) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    w.write_all(&(mask.width as u32).to_le_bytes())?;
    w.write_all(&(mask.height as u32).to_le_bytes())?;
    let mut bytes = vec![0u8; mask.data.len().div_ceil(8)];
    for (i, &v) in mask.data.iter().enumerate() {
        if v {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_mask(r: &mut impl Read) -> Result<ValidMask> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MASK_MAGIC {
        return Err(Error::Format("bad mask magic".into()));
    }
    let (w, h) = read_dims(r)?;
    let mut bytes = vec![0u8; (w * h).div_ceil(8)];
    r.read_exact(&mut bytes)?;
    let data = (0..w * h).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(ValidMask {
        width: w,
        height: h,
        data,
    })
}

/// One motion per line: `tx ty tz rx ry rz`.
pub fn format_motions(motions: &[RelativeMotion]) -> String {
    motions
        .iter()
        .map(|m| {
            let a = m.to_array();
            format!("{} {} {} {} {} {}\n", a[0], a[1], a[2], a[3], a[4], a[5])
        })
        .collect()
}

fn numbers(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: format!("not a finite number: {t:?}"),
                })
        })
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_motions(text: &str) -> Result<Vec<RelativeMotion>> {
    content_lines(text)
        .map(|(n, line)| {
            let v = numbers(line, n)?;
            let a: [f64; 6] = v.as_slice().try_into().map_err(|_| Error::Parse {
                line: n,
                message: format!("expected 6 numbers, got {}", v.len()),
            })?;
            RelativeMotion::from_array(a).map_err(|e| Error::Parse {
                line: n,
                message: e.to_string(),
            })
        })
        .collect()
}

fn flow_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(FLOW_DIR).join(format!("{i:06}.uvfl"))
}

fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(FLOW_DIR).join(format!("{i:06}.msk"))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes `meta` (the given config echo followed by sample count and camera),
/// the motions file, and one flow and mask file per sample. Returns the
/// written paths.
pub fn write_dataset(dir: &Path, samples: &[Sample], config_echo: &[(String, String)]) -> Result<Vec<PathBuf>> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument {
        what: "dataset",
        reason: "empty".into(),
    })?;
    if samples.iter().any(|s| s.intrinsics != first.intrinsics) {
        return Err(Error::Mismatch("samples use different cameras".into()));
    }
    fs::create_dir_all(dir.join(FLOW_DIR))?;
    let k = first.intrinsics;
    let mut meta: String = config_echo.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    meta.push_str(&format!(
        "count = {}\ncamera = {},{},{},{},{},{}\n",
        samples.len(),
        k.fx,
        k.fy,
        k.ox,
        k.oy,
        k.width,
        k.height
    ));
    let mut written = vec![dir.join(META_FILE), dir.join(MOTIONS_FILE)];
    fs::write(&written[0], meta)?;
    let motions: Vec<RelativeMotion> = samples.iter().map(|s| s.motion).collect();
    fs::write(&written[1], format_motions(&motions))?;
    for (i, s) in samples.iter().enumerate() {
        let (fp, mp) = (flow_path(dir, i), mask_path(dir, i));
        write_file(&fp, |w| write_flow(w, &s.flow))?;
        write_file(&mp, |w| write_mask(w, &s.valid_mask))?;
        written.push(fp);
        written.push(mp);
    }
    Ok(written)
}

/// `key = value` lines of a `meta` file.
pub fn read_meta(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(dir.join(META_FILE))?;
    content_lines(&text)
        .map(|(n, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Parse {
                    line: n,
                    message: format!("expected key = value, got {l:?}"),
                })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let meta = read_meta(dir)?;
    let get = |key: &str| {
        meta.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("meta lacks {key:?}")))
    };
    let count: usize = get("count")?
        .parse()
        .map_err(|_| Error::Format("bad count in meta".into()))?;
    let cam: Vec<f64> = get("camera")?
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Format("bad camera in meta".into())))
        .collect::<Result<_>>()?;
    if cam.len() != 6 {
        return Err(Error::Format("camera needs fx,fy,ox,oy,width,height".into()));
    }
    let k = CameraIntrinsics::new(cam[0], cam[1], cam[2], cam[3], cam[4] as usize, cam[5] as usize)?;
    let motions = parse_motions(&fs::read_to_string(dir.join(MOTIONS_FILE))?)?;
    if motions.len() != count {
        return Err(Error::Mismatch(format!("meta says {count} samples, motions file has {}", motions.len())));
    }
    motions
        .into_iter()
        .enumerate()
        .map(|(i, motion)| {
            let flow = read_flow(&mut fs::File::open(flow_path(dir, i))?)?;
            let valid_mask = read_mask(&mut fs::File::open(mask_path(dir, i))?)?;
            if (flow.width, flow.height) != (k.width, k.height) || (valid_mask.width, valid_mask.height) != (k.width, k.height) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", k.width, k.height),
                    got: format!("sample {i}: flow {}x{}, mask {}x{}", flow.width, flow.height, valid_mask.width, valid_mask.height),
                });
            }
            Ok(Sample {
                flow,
                motion,
                intrinsics: k,
                valid_mask,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// 12 numbers per line: row-major 3x4 `[R | t]`.
    Kitti,
    /// `timestamp tx ty tz qx qy qz qw`.
    Tum,
}

fn nearest_rotation(m: &Mat3) -> Mat3 {
    Rotation3::from_matrix_eps(m, 1e-15, 100, Rotation3::identity()).into_inner()
}

/// Parses a trajectory, detecting the format from the first line's shape.
/// KITTI poses are stamped with their line index.
pub fn parse_trajectory(text: &str) -> Result<(Trajectory, TrajectoryFormat)> {
    let mut format = None;
    let mut entries = Vec::new();
    for (n, line) in content_lines(text) {
        let v = numbers(line, n)?;
        let this = match v.len() {
            12 => TrajectoryFormat::Kitti,
            8 => TrajectoryFormat::Tum,
            k => {
                return Err(Error::Parse {
                    line: n,
                    message: format!("expected 12 (KITTI) or 8 (TUM) numbers, got {k}"),
                })
            }
        };
        if *format.get_or_insert(this) != this {
            return Err(Error::Parse {
                line: n,
                message: "mixed trajectory formats in one file".into(),
            });
        }
        let (t, pose) = match this {
            TrajectoryFormat::Kitti => {
                let r = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
                (
                    entries.len() as f64,
                    Pose {
                        position: Vec3::new(v[3], v[7], v[11]),
                        rotation: nearest_rotation(&r),
                    },
                )
            }
            TrajectoryFormat::Tum => {
                let q = Quaternion::new(v[7], v[4], v[5], v[6]);
                if q.norm() < 1e-9 {
                    return Err(Error::Parse {
                        line: n,
                        message: "zero quaternion".into(),
                    });
                }
                let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
                (
                    v[0],
                    Pose {
                        position: Vec3::new(v[1], v[2], v[3]),
                        rotation: rot,
                    },
                )
            }
        };
        entries.push((t, pose));
    }
    let format = format.ok_or_else(|| Error::Parse {
        line: 0,
        message: "empty trajectory".into(),
    })?;
    let traj = Trajectory::new(entries).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    Ok((traj, format))
}

pub fn format_trajectory(traj: &Trajectory, format: TrajectoryFormat) -> String {
    let mut s = String::new();
    for (t, p) in traj.timestamps().iter().zip(traj.poses()) {
        let (r, x) = (&p.rotation, &p.position);
        match format {
            TrajectoryFormat::Kitti => s.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {} {} {}\n",
                r[(0, 0)], r[(0, 1)], r[(0, 2)], x.x,
                r[(1, 0)], r[(1, 1)], r[(1, 2)], x.y,
                r[(2, 0)], r[(2, 1)], r[(2, 2)], x.z
            )),
            TrajectoryFormat::Tum => {
                let q = UnitQuaternion::from_matrix(r);
                s.push_str(&format!(
                    "{} {} {} {} {} {} {} {}\n",
                    t, x.x, x.y, x.z, q.i, q.j, q.k, q.w
                ));
            }
        }
    }
    s
}

/// Pairs the poses of two trajectories. Two TUM files are matched on equal
/// timestamps (within `1e-6`); otherwise poses are paired by index and the
/// lengths must agree.
pub fn match_trajectories(
    est: (Trajectory, TrajectoryFormat),
    gt: (Trajectory, TrajectoryFormat),
) -> Result<(Trajectory, Trajectory)> {
    let ((e, ef), (g, gf)) = (est, gt);
    if ef == TrajectoryFormat::Tum && gf == TrajectoryFormat::Tum && e.timestamps() != g.timestamps() {
        let mut pe = Vec::new();
        let mut pg = Vec::new();
        let mut j = 0;
        for (t, pose) in e.timestamps().iter().zip(e.poses()) {
            while j < g.len() && g.timestamps()[j] < t - 1e-6 {
                j += 1;
            }
            if j < g.len() && (g.timestamps()[j] - t).abs() <= 1e-6 {
                pe.push((*t, *pose));
                pg.push((*t, g.poses()[j]));
            }
        }
        if pe.len() < 2 {
            return Err(Error::Mismatch(format!(
                "only {} timestamps in common",
                pe.len()
            )));
        }
        return Ok((Trajectory::new(pe)?, Trajectory::new(pg)?));
    }
    if e.len() != g.len() {
        return Err(Error::Mismatch(format!(
            "estimate has {} poses, ground truth {}",
            e.len(),
            g.len()
        )));
    }
    Ok((e, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::integrate;
    use crate::geometry::exp_so3;

    #[test]
    fn flow_and_mask_round_trip() {
        let mut flow = FlowField::zeros(5, 3);
        flow.set(4, 2, (1.5, -0.25));
        let mut buf = Vec::new();
        write_flow(&mut buf, &flow).unwrap();
        assert_eq!(&buf[..4], b"UVFL");
        assert_eq!(buf.len(), 12 + 5 * 3 * 2 * 4);
        assert_eq!(read_flow(&mut buf.as_slice()).unwrap(), flow);

        let mut mask = ValidMask::all_valid(5, 3);
        mask.data[3] = false;
        mask.data[14] = false;
        let mut buf = Vec::new();
        write_mask(&mut buf, &mask).unwrap();
        assert_eq!(buf.len(), 12 + 2);
        assert_eq!(read_mask(&mut buf.as_slice()).unwrap(), mask);
        assert!(read_flow(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn motions_round_trip() {
        let m = vec![
            RelativeMotion::new(Vec3::new(0.1, -0.2, 0.3), Vec3::new(0.01, 0.02, -0.03)).unwrap(),
            RelativeMotion::identity(),
        ];
        assert_eq!(parse_motions(&format_motions(&m)).unwrap(), m);
        assert!(matches!(parse_motions("1 2 3\n"), Err(Error::Parse { line: 1, .. })));
    }

    fn sample_trajectory() -> Trajectory {
        let m = RelativeMotion::new(Vec3::new(0.1, 0.0, 1.0), Vec3::new(0.0, 0.05, 0.01)).unwrap();
        integrate(&[m; 6], Pose::identity())
    }

    #[test]
    fn trajectory_formats_round_trip() {
        let t = sample_trajectory();
        for f in [TrajectoryFormat::Kitti, TrajectoryFormat::Tum] {
            let (back, detected) = parse_trajectory(&format_trajectory(&t, f)).unwrap();
            assert_eq!(detected, f);
            for (a, b) in back.poses().iter().zip(t.poses()) {
                assert!((a.position - b.position).norm() < 1e-12);
                assert!((a.rotation - b.rotation).abs().max() < 1e-12);
            }
        }
        assert!(parse_trajectory("1 2 3\n").is_err());
        let r = exp_so3(&Vec3::new(0.0, 0.0, 0.3)).unwrap();
        assert!((nearest_rotation(&(r * 1.000001)) - r).abs().max() < 1e-9);
    }

    #[test]
    fn tum_files_match_on_timestamps() {
        let t = sample_trajectory();
        let text = format_trajectory(&t, TrajectoryFormat::Tum);
        let short: String = text.lines().skip(2).map(|l| format!("{l}\n")).collect();
        let (e, g) = match_trajectories(parse_trajectory(&short).unwrap(), parse_trajectory(&text).unwrap()).unwrap();
        assert_eq!(e.len(), 5);
        assert_eq!(e.poses(), g.poses());
        let kitti = format_trajectory(&t, TrajectoryFormat::Kitti);
        assert!(matches!(
            match_trajectories(parse_trajectory(&short).unwrap(), parse_trajectory(&kitti).unwrap()),
            Err(Error::Mismatch(_))
        ));
    }
}
