//! File formats: skeleton JSON, pose and camera CSVs, dictionary files and
//! error reports.
//!
//! CSVs use a header row, `,` separators, `\n` line ends and C-locale
//! floats. Frame and joint columns are zero-based; every (frame, joint) pair
//! must appear exactly once, in any order. Floats are written in their
//! shortest round-trip form, so write-then-read reproduces the values bit
//! for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Matrix2x3, Matrix2xX, Matrix3xX};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraMat, CameraSeq};
use crate::dict::PoseDictionary;
use crate::error::{Error, Result};
use crate::eval::{ErrorReport, SweepResult};
use crate::skeleton::{Pose2D, Pose3D, PoseSeq2D, PoseSeq3D, Skeleton};

pub const POSE3D_HEADER: [&str; 5] = ["frame", "joint", "x", "y", "z"];
pub const TRACKS_HEADER: [&str; 5] = ["frame", "joint", "u", "v", "conf"];
pub const CAMERA_HEADER: [&str; 7] = ["frame", "r11", "r12", "r13", "r21", "r22", "r23"];
pub const DICT_HEADER: [&str; 5] = ["basis", "joint", "x", "y", "z"];
pub const ERRORS_HEADER: [&str; 4] = ["sequence", "frame", "joint", "error"];
pub const SWEEP_ERRORS_HEADER: [&str; 6] = ["velocity", "method", "sequence", "frame", "joint", "error"];
pub const SWEEP_HEADER: [&str; 3] = ["velocity", "method", "error"];

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: display(path),
        source,
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: display(path),
        line,
        msg: msg.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

/// Numeric CSV rows: the first `n_index` columns as indices, the rest as
/// floats. `line_offset` is added to reported line numbers.
struct Rows {
    rows: Vec<(u64, Vec<usize>, Vec<f64>)>,
}

fn read_rows<R: Read>(input: R, path: &Path, header: &[&str], n_index: usize, line_offset: u64) -> Result<Rows> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let found = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(parse_err(
            path,
            1 + line_offset,
            format!(
                "expected header `{}`, found `{}`",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0) + line_offset;
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let mut idx = Vec::with_capacity(n_index);
        let mut vals = Vec::with_capacity(header.len() - n_index);
        for (c, field) in rec.iter().enumerate() {
            if c < n_index {
                let v: usize = field.parse().map_err(|_| {
                    parse_err(
                        path,
                        line,
                        format!("{}: `{field}` is not a nonnegative integer", header[c]),
                    )
                })?;
                idx.push(v);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("{}: `{field}` is not a number", header[c])))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("{}: `{field}` is not finite", header[c])));
                }
                vals.push(v);
            }
        }
        rows.push((line, idx, vals));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1 + line_offset, "no data rows"));
    }
    Ok(Rows { rows })
}

/// Arranges `(frame, joint)` rows into a dense `n x p` grid of value vectors.
fn grid(path: &Path, rows: Rows) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = rows.rows.iter().map(|r| r.1[0]).max().unwrap_or(0) + 1;
    let p = rows.rows.iter().map(|r| r.1[1]).max().unwrap_or(0) + 1;
    let mut out: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; p]; n];
    let last_line = rows.rows.iter().map(|r| r.0).max().unwrap_or(0);
    for (line, idx, vals) in rows.rows {
        let slot = &mut out[idx[0]][idx[1]];
        if slot.is_some() {
            return Err(parse_err(
                path,
                line,
                format!("duplicate row for frame {}, joint {}", idx[0], idx[1]),
            ));
        }
        *slot = Some(vals);
    }
    out.into_iter()
        .enumerate()
        .map(|(t, frame)| {
            frame
                .into_iter()
                .enumerate()
                .map(|(j, v)| v.ok_or_else(|| parse_err(path, last_line, format!("frame {t}, joint {j} is missing"))))
                .collect()
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line() as u64, e.to_string()))
}

pub fn write_skeleton(path: &Path, sk: &Skeleton) -> Result<()> {
    write_json(path, sk)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line() as u64, e.to_string()))
}

/// 3D poses from `frame,joint,x,y,z`.
pub fn read_poses3d(path: &Path, fps: f64) -> Result<PoseSeq3D> {
    let rows = read_rows(open(path)?, path, &POSE3D_HEADER, 2, 0)?;
    let frames = grid(path, rows)?
        .into_iter()
        .map(|f| Pose3D::new(Matrix3xX::from_iterator(f.len(), f.into_iter().flatten())))
        .collect::<Result<Vec<_>>>()?;
    PoseSeq3D::new(frames, fps)
}

pub fn write_poses3d(path: &Path, seq: &PoseSeq3D) -> Result<()> {
    let mut w = writer(create(path)?);
    w.write_record(POSE3D_HEADER).map_err(|e| csv_err(path, e))?;
    for (t, f) in seq.frames.iter().enumerate() {
        for (j, c) in f.coords.column_iter().enumerate() {
            w.write_record([t.to_string(), j.to_string(), fmt(c[0]), fmt(c[1]), fmt(c[2])])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// 2D tracks from `frame,joint,u,v,conf`.
pub fn read_tracks(path: &Path, fps: f64) -> Result<PoseSeq2D> {
    let rows = read_rows(open(path)?, path, &TRACKS_HEADER, 2, 0)?;
    let frames = grid(path, rows)?
        .into_iter()
        .enumerate()
        .map(|(t, f)| {
            let coords = Matrix2xX::from_iterator(f.len(), f.iter().flat_map(|v| [v[0], v[1]]));
            let conf = DVector::from_iterator(f.len(), f.iter().map(|v| v[2]));
            Pose2D::new(coords, conf).map_err(|e| e.in_frame(t))
        })
        .collect::<Result<Vec<_>>>()?;
    PoseSeq2D::new(frames, fps)
}

pub fn write_tracks(path: &Path, seq: &PoseSeq2D) -> Result<()> {
    let mut w = writer(create(path)?);
    w.write_record(TRACKS_HEADER).map_err(|e| csv_err(path, e))?;
    for (t, f) in seq.frames.iter().enumerate() {
        for j in 0..f.num_joints() {
            let c = f.coords.column(j);
            w.write_record([t.to_string(), j.to_string(), fmt(c[0]), fmt(c[1]), fmt(f.conf[j])])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Cameras from `frame,r11,r12,r13,r21,r22,r23`; rows must be orthonormal.
pub fn read_cameras(path: &Path) -> Result<CameraSeq> {
    let rows = read_rows(open(path)?, path, &CAMERA_HEADER, 1, 0)?;
    let n = rows.rows.iter().map(|r| r.1[0]).max().unwrap_or(0) + 1;
    let last_line = rows.rows.iter().map(|r| r.0).max().unwrap_or(0);
    let mut frames: Vec<Option<CameraMat>> = vec![None; n];
    for (line, idx, v) in rows.rows {
        if frames[idx[0]].is_some() {
            return Err(parse_err(path, line, format!("duplicate row for frame {}", idx[0])));
        }
        let cam = CameraMat::new(Matrix2x3::from_row_slice(&v)).map_err(|e| parse_err(path, line, e.to_string()))?;
        frames[idx[0]] = Some(cam);
    }
    let frames = frames
        .into_iter()
        .enumerate()
        .map(|(t, c)| c.ok_or_else(|| parse_err(path, last_line, format!("frame {t} is missing"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(CameraSeq { frames })
}

pub fn write_cameras(path: &Path, cams: &CameraSeq) -> Result<()> {
    let mut w = writer(create(path)?);
    w.write_record(CAMERA_HEADER).map_err(|e| csv_err(path, e))?;
    for (t, c) in cams.frames.iter().enumerate() {
        let r = c.rows();
        let mut rec = vec![t.to_string()];
        for a in 0..2 {
            for b in 0..3 {
                rec.push(fmt(r[(a, b)]));
            }
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// First line of a dictionary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictHeader {
    joints: Vec<String>,
    k: usize,
    p: usize,
    #[serde(default)]
    explained: Vec<f64>,
}

/// A dictionary: one JSON header line, then `basis,joint,x,y,z` rows with
/// basis `-1` for the mean.
pub fn read_dictionary(path: &Path) -> Result<PoseDictionary> {
    let mut reader = BufReader::new(open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| io_err(path, e))?;
    let header: DictHeader =
        serde_json::from_str(first.trim_end()).map_err(|e| parse_err(path, 1, format!("header: {e}")))?;
    // Shift the mean's `-1` to row 0 so the index column parses as unsigned.
    let mut rest = String::new();
    reader.read_to_string(&mut rest).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(rest.as_bytes());
    let found = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(DICT_HEADER.iter().copied()) {
        return Err(parse_err(
            path,
            2,
            format!("expected header `{}`", DICT_HEADER.join(",")),
        ));
    }
    let (k, p) = (header.k, header.p);
    if header.joints.len() != p {
        return Err(parse_err(
            path,
            1,
            format!("{} joint names for p = {p}", header.joints.len()),
        ));
    }
    let mut slots: Vec<Vec<Option<[f64; 3]>>> = vec![vec![None; p]; k + 1];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0) + 1;
        if rec.len() != 5 {
            return Err(parse_err(path, line, format!("expected 5 fields, found {}", rec.len())));
        }
        let basis: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("basis: `{}` is not an integer", &rec[0])))?;
        let joint: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("joint: `{}` is not an index", &rec[1])))?;
        if basis < -1 || basis >= k as i64 || joint >= p {
            return Err(parse_err(
                path,
                line,
                format!("basis {basis}, joint {joint} out of range for k = {k}, p = {p}"),
            ));
        }
        let mut v = [0.0; 3];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = rec[2 + i].parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| {
                parse_err(
                    path,
                    line,
                    format!("{}: `{}` is not a finite number", DICT_HEADER[2 + i], &rec[2 + i]),
                )
            })?;
        }
        let cell = &mut slots[(basis + 1) as usize][joint];
        if cell.is_some() {
            return Err(parse_err(
                path,
                line,
                format!("duplicate row for basis {basis}, joint {joint}"),
            ));
        }
        *cell = Some(v);
    }
    let mats = slots
        .into_iter()
        .enumerate()
        .map(|(b, cols)| {
            let cols = cols
                .into_iter()
                .enumerate()
                .map(|(j, c)| {
                    c.ok_or_else(|| parse_err(path, 0, format!("basis {}, joint {j} is missing", b as i64 - 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Matrix3xX::from_iterator(p, cols.into_iter().flatten()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mats = mats.into_iter();
    let mean = mats.next().expect("mean slot");
    let mut dict = PoseDictionary::new(mean, mats.collect(), header.joints)?;
    dict.explained = header.explained;
    Ok(dict)
}

pub fn write_dictionary(path: &Path, dict: &PoseDictionary) -> Result<()> {
    let header = DictHeader {
        joints: dict.joint_names.clone(),
        k: dict.bases.len(),
        p: dict.mean.ncols(),
        explained: dict.explained.clone(),
    };
    let mut out = create(path)?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    let mut w = writer(out);
    w.write_record(DICT_HEADER).map_err(|e| csv_err(path, e))?;
    for (b, m) in std::iter::once(&dict.mean).chain(&dict.bases).enumerate() {
        for (j, c) in m.column_iter().enumerate() {
            w.write_record([
                (b as i64 - 1).to_string(),
                j.to_string(),
                fmt(c[0]),
                fmt(c[1]),
                fmt(c[2]),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Every `*.csv` file of `dir` (sorted by name) read as 3D poses; their
/// frames are concatenated.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<Pose3D>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidParameter(format!("{}: no .csv files", display(dir))));
    }
    let mut poses = Vec::new();
    for f in files {
        poses.extend(read_poses3d(&f, 1.0)?.frames);
    }
    Ok(poses)
}

/// Per-frame, per-joint distances of several reports.
pub fn write_errors(path: &Path, reports: &[ErrorReport]) -> Result<()> {
    let mut w = writer(create(path)?);
    w.write_record(ERRORS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in reports {
        for (t, d) in r.distances.iter().enumerate() {
            for (i, &j) in r.joints.iter().enumerate() {
                w.write_record([r.sequence_id.clone(), t.to_string(), j.to_string(), fmt(d[i])])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// `sweep.csv` (one row per velocity and method) and the per-cell
/// distances as `errors.csv`.
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    let path = dir.join("sweep.csv");
    let mut w = writer(create(&path)?);
    w.write_record(SWEEP_HEADER).map_err(|e| csv_err(&path, e))?;
    for r in &result.rows {
        w.write_record([fmt(r.velocity), r.method.tag().to_string(), fmt(r.error)])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let path = dir.join("errors.csv");
    let mut w = writer(create(&path)?);
    w.write_record(SWEEP_ERRORS_HEADER).map_err(|e| csv_err(&path, e))?;
    for c in &result.cells {
        for (t, d) in c.report.distances.iter().enumerate() {
            for (i, &j) in c.report.joints.iter().enumerate() {
                w.write_record([
                    fmt(c.velocity),
                    c.method.tag().to_string(),
                    c.sequence.to_string(),
                    t.to_string(),
                    j.to_string(),
                    fmt(d[i]),
                ])
                .map_err(|e| csv_err(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{synthesize_tracks, OrbitSpec};
    use crate::synthetic::{planted_sequence, random_corpus};

    #[test]
    fn files_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let gt = planted_sequence(30, 24.0, 3, 1).unwrap();
        let spec = OrbitSpec {
            duration_s: 1.25,
            noise: 3.0,
            outlier_rate: 0.1,
            outlier_mag: 100.0,
            ..Default::default()
        };
        let syn = synthesize_tracks(&gt, &spec).unwrap();

        let p = dir.path().join("poses.csv");
        write_poses3d(&p, &gt).unwrap();
        assert_eq!(read_poses3d(&p, 24.0).unwrap(), gt);

        let p = dir.path().join("tracks.csv");
        write_tracks(&p, &syn.tracks).unwrap();
        assert_eq!(read_tracks(&p, 24.0).unwrap(), syn.tracks);

        let p = dir.path().join("cams.csv");
        write_cameras(&p, &syn.cameras).unwrap();
        assert_eq!(read_cameras(&p).unwrap(), syn.cameras);

        let sk = Skeleton::body15();
        let p = dir.path().join("sk.json");
        write_skeleton(&p, &sk).unwrap();
        assert_eq!(read_skeleton(&p).unwrap(), sk);

        let dict = crate::dict::learn_dictionary(
            &random_corpus(200, 3),
            &sk,
            &crate::dict::LearnOptions {
                k: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let p = dir.path().join("dict.txt");
        write_dictionary(&p, &dict).unwrap();
        assert_eq!(read_dictionary(&p).unwrap(), dict);
    }

    #[test]
    fn rows_may_come_in_any_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "frame,joint,x,y,z\n1,0,5,6,7\n0,1,1,2,3\n0,0,0,0,0\n1,1,1,1,1\n").unwrap();
        let seq = read_poses3d(&p, 10.0).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.frames[1].coords[(2, 0)], 7.0);
        assert_eq!(seq.frames[0].coords[(1, 1)], 2.0);
    }

    fn parse_line(text: &str) -> (u64, String) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, text).unwrap();
        match read_poses3d(&p, 24.0) {
            Err(Error::Parse { line, msg, .. }) => (line, msg),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_csv_reports_the_line() {
        assert_eq!(parse_line("frame,joint,x,y,z\n0,0,1,2,3\n0,1,1,oops,3\n").0, 3);
        assert_eq!(parse_line("frame,joint,x,y\n0,0,1,2\n").0, 1);
        assert_eq!(parse_line("frame,joint,x,y,z\n0,0,1,2,3\n0,0,1,2,3\n").0, 3);
        assert_eq!(parse_line("frame,joint,x,y,z\n0,0,1,2,3\n-1,0,1,2,3\n").0, 3);
        assert_eq!(parse_line("frame,joint,x,y,z\n0,0,1,2,3\n0,1,1,2,inf\n").0, 3);
        let (line, msg) = parse_line("frame,joint,x,y,z\n0,0,1,2,3\n1,1,1,2,3\n");
        assert_eq!(line, 3);
        assert!(msg.contains("missing"), "{msg}");
    }

    #[test]
    fn non_orthonormal_camera_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "frame,r11,r12,r13,r21,r22,r23\n0,1,0,0,0,1,0\n1,1,0,0,0,1.1,0\n").unwrap();
        assert!(matches!(read_cameras(&p), Err(Error::Parse { line: 3, .. })));
    }
}
