//! Text formats: point clouds (xyz, ply), annotations, keypoint files and
//! visualization exports. Everything is written with shortest round-trip
//! float formatting so that files are reproducible byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mrkp_core::geometry::{AnnotationSet, KeypointSet, PointCloud};
use mrkp_core::skeleton::SkeletonReconstruction;
use mrkp_core::vec3::Point3;
use mrkp_core::Error as CoreError;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    XyzAscii,
    PlyAscii,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(Self::XyzAscii),
            "ply" => Some(Self::PlyAscii),
            _ => None,
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> CoreError {
    CoreError::Parse { line, msg: msg.into() }
}

fn parse_f64(tok: &str, line: usize) -> std::result::Result<f64, CoreError> {
    tok.parse::<f64>().map_err(|_| parse_err(line, format!("`{tok}` is not a number")))
}

fn parse_i64(tok: &str, line: usize) -> std::result::Result<i64, CoreError> {
    tok.parse::<i64>().map_err(|_| parse_err(line, format!("`{tok}` is not an integer")))
}

type Parsed = (Vec<Point3>, Option<Vec<i64>>);

/// `x y z [part]` per line; blank lines and `#` comments are skipped.
pub fn parse_xyz(text: &str) -> mrkp_core::Result<Parsed> {
    let mut points = Vec::new();
    let mut parts = Vec::new();
    let mut with_part = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 3 && toks.len() != 4 {
            return Err(parse_err(line, format!("expected `x y z [part]`, found {} fields", toks.len())));
        }
        let has = toks.len() == 4;
        if *with_part.get_or_insert(has) != has {
            return Err(parse_err(line, "part column present on some lines only"));
        }
        points.push([parse_f64(toks[0], line)?, parse_f64(toks[1], line)?, parse_f64(toks[2], line)?]);
        if has {
            parts.push(parse_i64(toks[3], line)?);
        }
    }
    Ok((points, with_part.unwrap_or(false).then_some(parts)))
}

/// ASCII ply. Reads the `vertex` element; `x`, `y`, `z` are required and an
/// integer `part` property is picked up when present. Other properties and
/// elements are skipped.
pub fn parse_ply(text: &str) -> mrkp_core::Result<Parsed> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing `ply` magic")),
    }
    // (name, count, property names and whether each is a list)
    let mut elements: Vec<(String, usize, Vec<(String, bool)>)> = Vec::new();
    let mut ascii = false;
    let mut last = 1;
    loop {
        let Some((line, l)) = lines.next() else {
            return Err(parse_err(last, "header is not terminated by `end_header`"));
        };
        last = line;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => ascii = true,
            ["format", other, ..] => return Err(parse_err(line, format!("unsupported ply format `{other}`"))),
            ["element", name, count] => {
                let n = count.parse().map_err(|_| parse_err(line, format!("bad element count `{count}`")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", _, _, name] | ["property", _, name] => {
                let list = toks[1] == "list";
                match elements.last_mut() {
                    Some(e) => e.2.push((name.to_string(), list)),
                    None => return Err(parse_err(line, "property before any element")),
                }
            }
            _ => return Err(parse_err(line, format!("unrecognized header line `{l}`"))),
        }
    }
    if !ascii {
        return Err(parse_err(last, "missing `format ascii 1.0`"));
    }
    let mut points = Vec::new();
    let mut parts = Vec::new();
    let mut found = false;
    for (name, count, props) in &elements {
        let is_vertex = name == "vertex";
        let col = |p: &str| props.iter().position(|(n, list)| n == p && !list);
        let (cx, cy, cz, cp) = (col("x"), col("y"), col("z"), col("part"));
        if is_vertex {
            if cx.is_none() || cy.is_none() || cz.is_none() {
                return Err(parse_err(last, "vertex element lacks x, y or z"));
            }
            if props.iter().any(|p| p.1) {
                return Err(parse_err(last, "list properties on vertices are not supported"));
            }
            found = true;
        }
        let mut seen = 0;
        while seen < *count {
            let Some((line, l)) = lines.next() else {
                return Err(parse_err(last + 1, format!("expected {count} `{name}` records, found {seen}")));
            };
            last = line;
            if l.is_empty() {
                continue;
            }
            seen += 1;
            if !is_vertex {
                continue;
            }
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != props.len() {
                return Err(parse_err(line, format!("expected {} values, found {}", props.len(), toks.len())));
            }
            let v = |c: Option<usize>| parse_f64(toks[c.unwrap()], line);
            points.push([v(cx)?, v(cy)?, v(cz)?]);
            if let Some(c) = cp {
                parts.push(parse_i64(toks[c], line)?);
            }
        }
    }
    if !found {
        return Err(parse_err(last, "no vertex element"));
    }
    let has_part = elements.iter().any(|e| e.0 == "vertex" && e.2.iter().any(|p| p.0 == "part"));
    Ok((points, has_part.then_some(parts)))
}

/// Reads a cloud; the id is the file stem and the category is left empty.
pub fn load_pointcloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let (points, parts) = match format {
        CloudFormat::XyzAscii => parse_xyz(&text),
        CloudFormat::PlyAscii => parse_ply(&text),
    }
    .map_err(Error::at(path))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PointCloud::new(points, parts)?.with_meta("", id))
}

/// Loads a cloud, choosing the format from the extension.
pub fn load_any(path: &Path) -> Result<PointCloud> {
    let format = CloudFormat::from_path(path)
        .ok_or_else(|| Error::Usage(format!("{}: unknown point cloud extension (use .xyz or .ply)", path.display())))?;
    load_pointcloud(path, format)
}

/// `.xyz` and `.ply` files of a directory in file-name order. Plain `.txt`
/// files are left out, since annotations and keypoints share that extension.
pub fn list_clouds(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("data directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("xyz" | "ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Usage(format!("no .xyz or .ply files in {}", dir.display())));
    }
    Ok(files)
}

pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(parts) = cloud.part_labels() {
            let _ = write!(out, " {}", parts[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_ply(cloud: &PointCloud) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.part_labels().is_some() {
        out.push_str("property int part\n");
    }
    out.push_str("end_header\n");
    out.push_str(&write_xyz(cloud));
    out
}

/// Annotation records `cloud_id semantic_id x y z`, grouped by cloud.
pub fn parse_annotations(text: &str) -> mrkp_core::Result<BTreeMap<String, AnnotationSet>> {
    let mut raw: BTreeMap<String, Vec<(i64, Point3)>> = BTreeMap::new();
    let mut first_line: BTreeMap<String, usize> = BTreeMap::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        let body = l.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(parse_err(line, "expected `cloud_id semantic_id x y z`"));
        }
        let id = parse_i64(toks[1], line)?;
        let p = [parse_f64(toks[2], line)?, parse_f64(toks[3], line)?, parse_f64(toks[4], line)?];
        let entry = raw.entry(toks[0].to_string()).or_default();
        if entry.iter().any(|(other, _)| *other == id) {
            return Err(parse_err(line, format!("duplicate semantic id {id} for `{}`", toks[0])));
        }
        first_line.entry(toks[0].to_string()).or_insert(line);
        entry.push((id, p));
    }
    raw.into_iter()
        .map(|(cloud, kps)| {
            let line = first_line[&cloud];
            AnnotationSet::new(cloud.clone(), kps)
                .map(|a| (cloud, a))
                .map_err(|e| parse_err(line, e.to_string()))
        })
        .collect()
}

pub fn write_annotations(sets: &[AnnotationSet]) -> String {
    let mut out = String::new();
    for set in sets {
        for (id, p) in set.keypoints() {
            let _ = writeln!(out, "{} {} {} {} {}", set.cloud_id, id, p[0], p[1], p[2]);
        }
    }
    out
}

pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, AnnotationSet>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_annotations(&text).map_err(Error::at(path))
}

/// One `channel x y z` record per keypoint, preceded by an optional
/// `# run <id>` comment.
pub fn write_keypoints(kp: &KeypointSet, run: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(run) = run {
        let _ = writeln!(out, "# run {run}");
    }
    for (c, p) in kp.keypoints.iter().enumerate() {
        let _ = writeln!(out, "{} {} {} {}", c, p[0], p[1], p[2]);
    }
    out
}

/// Channels must be exactly `0..K` in order.
pub fn parse_keypoints(text: &str, source_id: &str) -> mrkp_core::Result<KeypointSet> {
    let mut kps = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        let body = l.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(parse_err(line, "expected `channel x y z`"));
        }
        let c = parse_i64(toks[0], line)?;
        if c != kps.len() as i64 {
            return Err(parse_err(line, format!("expected channel {}, found {c}", kps.len())));
        }
        kps.push([parse_f64(toks[1], line)?, parse_f64(toks[2], line)?, parse_f64(toks[3], line)?]);
    }
    Ok(KeypointSet::new(kps, source_id))
}

pub fn load_keypoints(path: &Path) -> Result<KeypointSet> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_keypoints(&text, &id).map_err(Error::at(path))
}

/// Channel colors, indexed by channel modulo 10.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
];

pub const GREY: [u8; 3] = [160, 160, 160];

pub fn channel_color(channel: usize) -> [u8; 3] {
    PALETTE[channel % PALETTE.len()]
}

/// Vertex kinds in a visualization export.
pub const KIND_CLOUD: i32 = 0;
pub const KIND_KEYPOINT: i32 = 1;
pub const KIND_RECONSTRUCTION: i32 = 2;

/// Colored ply with the cloud (grey, with per-point saliency), the
/// keypoints (palette color per channel) and the reconstruction (colored by
/// the first endpoint of each segment, shaded by activation).
pub fn write_viz(cloud: &PointCloud, saliency: &[f64], kp: &KeypointSet, rec: &SkeletonReconstruction) -> String {
    let total = cloud.len() + kp.len() + rec.total_points();
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {total}");
    out.push_str(
        "property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property int kind\nproperty int channel\nproperty int segment\n\
         property double saliency\nproperty double activation\nend_header\n",
    );
    let mut vertex = |p: Point3, rgb: [u8; 3], kind: i32, channel: i64, segment: i64, sal: f64, act: f64| {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {}",
            p[0], p[1], p[2], rgb[0], rgb[1], rgb[2], kind, channel, segment, sal, act
        );
    };
    for (p, s) in cloud.points().iter().zip(saliency) {
        vertex(*p, GREY, KIND_CLOUD, -1, -1, *s, 0.0);
    }
    for (c, p) in kp.keypoints.iter().enumerate() {
        vertex(*p, channel_color(c), KIND_KEYPOINT, c as i64, -1, 0.0, 0.0);
    }
    for (i, seg) in rec.segments.iter().enumerate() {
        let base = channel_color(seg.endpoints.0);
        let shade = 0.25 + 0.75 * seg.activation.clamp(0.0, 1.0);
        let rgb = base.map(|v| (v as f64 * shade).round() as u8);
        for p in &seg.points {
            vertex(*p, rgb, KIND_RECONSTRUCTION, -1, i as i64, 0.0, seg.activation);
        }
    }
    out
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(Error::io(dir))?;
    tmp.write_all(contents).map_err(Error::io(path))?;
    tmp.as_file().sync_all().map_err(Error::io(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}
