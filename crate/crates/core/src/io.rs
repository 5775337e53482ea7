//! Scene and instance files.
//!
//! A scene is a pair of files sharing one stem: `<stem>.scene` holds a
//! plain-text header plus a little-endian f32 payload of N x 9 channels
//! (position, color, normal), and `<stem>.ann` holds structured-text
//! annotation records (ground-truth boxes, ground-truth masks, optional
//! external proposals). Instance files (`.inst`) carry mined instances.
//! All numbers are written with the shortest round-trip formatting, so a
//! save/load cycle is lossless.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::consistency::BoxProposal;
use crate::error::{Error, ParseErrorKind, Result};
use crate::geometry::{Aabb, PointCloud};
use crate::linalg::Vec3;
use crate::pipeline::InstanceCandidate;

const SCENE_MAGIC: &str = "boxmine-scene";
const ANN_MAGIC: &str = "boxmine-ann";
const INST_MAGIC: &str = "boxmine-instances";
const VERSION: &str = "v1";
const CHANNELS: usize = 9;

/// Ground-truth box of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub instance_id: usize,
    pub class_id: usize,
    pub aabb: Aabb,
}

/// Ground-truth point mask of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtMask {
    pub instance_id: usize,
    pub class_id: usize,
    pub points: Vec<usize>,
}

/// A scene in memory: the cloud plus its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub num_classes: usize,
    pub gt_boxes: Vec<GtBox>,
    pub gt_masks: Vec<GtMask>,
    /// External proposals, when the annotation file carries any.
    pub proposals: Vec<BoxProposal>,
}

/// Parsed contents of an annotation file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub num_classes: usize,
    pub gt_boxes: Vec<GtBox>,
    pub gt_masks: Vec<GtMask>,
    pub proposals: Vec<BoxProposal>,
}

fn ann_path(scene_path: &Path) -> std::path::PathBuf {
    scene_path.with_extension("ann")
}

/// Write `<stem>.scene` and `<stem>.ann`. The payload is quantized to f32.
pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!("{SCENE_MAGIC} {VERSION}\n"));
    header.push_str(&format!("points {}\n", scene.cloud.len()));
    header.push_str(&format!("classes {}\n", scene.num_classes));
    header.push_str("channels position color normal\n");
    header.push_str("units meters\n");
    header.push_str("end_header\n");

    let mut payload = Vec::with_capacity(scene.cloud.len() * CHANNELS * 4);
    for i in 0..scene.cloud.len() {
        for channel in [
            scene.cloud.positions[i],
            scene.cloud.colors[i],
            scene.cloud.normals[i],
        ] {
            for v in channel {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&payload)?;

    let mut ann = String::new();
    ann.push_str(&format!("{ANN_MAGIC} {VERSION}\n"));
    ann.push_str(&format!("classes {}\n", scene.num_classes));
    for b in &scene.gt_boxes {
        ann.push_str(&format!(
            "gtbox {} {} {}\n",
            b.instance_id,
            b.class_id,
            corners(&b.aabb)
        ));
    }
    for m in &scene.gt_masks {
        let idx: Vec<String> = m.points.iter().map(|i| i.to_string()).collect();
        ann.push_str(&format!(
            "gtmask {} {} {} {}\n",
            m.instance_id,
            m.class_id,
            m.points.len(),
            idx.join(" ")
        ));
    }
    for p in &scene.proposals {
        let probs: Vec<String> = p.class_probs.iter().map(|v| v.to_string()).collect();
        ann.push_str(&format!(
            "proposal {} {} {}\n",
            p.class_id,
            corners(&p.aabb),
            probs.join(" ")
        ));
    }
    ann.push_str("end\n");
    fs::write(ann_path(path), ann)?;
    Ok(())
}

fn corners(aabb: &Aabb) -> String {
    format!(
        "{} {} {} {} {} {}",
        aabb.min[0], aabb.min[1], aabb.min[2], aabb.max[0], aabb.max[1], aabb.max[2]
    )
}

/// Load `<stem>.scene` plus its annotation sidecar. A missing sidecar
/// yields empty annotations.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path)?;
    // The header is ASCII lines up to and including `end_header`.
    let header_end = find_header_end(&bytes)
        .ok_or_else(|| Error::parse(path, ParseErrorKind::BadMagic))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::parse(path, ParseErrorKind::BadMagic))?;

    let mut points: Option<usize> = None;
    let mut classes: Option<usize> = None;
    for (lineno, line) in header.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if lineno == 0 {
            if fields.first() != Some(&SCENE_MAGIC) {
                return Err(Error::parse(path, ParseErrorKind::BadMagic));
            }
            if fields.get(1) != Some(&VERSION) {
                return Err(Error::parse(
                    path,
                    ParseErrorKind::UnsupportedVersion(
                        fields.get(1).unwrap_or(&"").to_string(),
                    ),
                ));
            }
            continue;
        }
        match fields.as_slice() {
            ["points", n] => {
                points = Some(parse_usize(path, lineno + 1, n)?);
            }
            ["classes", c] => {
                classes = Some(parse_usize(path, lineno + 1, c)?);
            }
            ["channels", ..] | ["units", ..] | ["end_header"] | [] => {}
            _ => {
                return Err(Error::parse(
                    path,
                    ParseErrorKind::Malformed {
                        line: lineno + 1,
                        msg: format!("unknown header line '{line}'"),
                    },
                ));
            }
        }
    }
    let n = points.ok_or_else(|| {
        Error::parse(
            path,
            ParseErrorKind::Malformed {
                line: 0,
                msg: "missing 'points' header".into(),
            },
        )
    })?;
    let num_classes = classes.ok_or_else(|| {
        Error::parse(
            path,
            ParseErrorKind::Malformed {
                line: 0,
                msg: "missing 'classes' header".into(),
            },
        )
    })?;

    let payload = &bytes[header_end..];
    let expected = n * CHANNELS * 4;
    if payload.len() != expected {
        return Err(Error::parse(
            path,
            ParseErrorKind::Truncated {
                expected,
                got: payload.len(),
            },
        ));
    }
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut cursor = payload;
    let mut read_vec3 = || -> Vec3 {
        let mut out = [0.0; 3];
        for v in &mut out {
            let mut buf = [0u8; 4];
            cursor.read_exact(&mut buf).expect("length checked above");
            *v = f32::from_le_bytes(buf) as f64;
        }
        out
    };
    for _ in 0..n {
        positions.push(read_vec3());
        colors.push(read_vec3());
        normals.push(read_vec3());
    }
    let cloud = PointCloud::new(positions, colors, normals)?;

    let ann_file = ann_path(path);
    let ann = if ann_file.exists() {
        load_annotations(&ann_file, n)?
    } else {
        Annotations {
            num_classes,
            ..Annotations::default()
        }
    };
    Ok(Scene {
        cloud,
        num_classes,
        gt_boxes: ann.gt_boxes,
        gt_masks: ann.gt_masks,
        proposals: ann.proposals,
    })
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    const MARKER: &[u8] = b"end_header\n";
    bytes
        .windows(MARKER.len())
        .position(|w| w == MARKER)
        .map(|pos| pos + MARKER.len())
}

fn parse_usize(path: &Path, line: usize, s: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| {
        Error::parse(
            path,
            ParseErrorKind::Malformed {
                line,
                msg: format!("bad integer '{s}'"),
            },
        )
    })
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| {
        Error::parse(
            path,
            ParseErrorKind::Malformed {
                line,
                msg: format!("bad number '{s}'"),
            },
        )
    })
}

fn parse_aabb(path: &Path, line: usize, fields: &[&str]) -> Result<Aabb> {
    if fields.len() != 6 {
        return Err(Error::parse(
            path,
            ParseErrorKind::Malformed {
                line,
                msg: "box needs 6 numbers".into(),
            },
        ));
    }
    let mut v = [0.0; 6];
    for (slot, s) in v.iter_mut().zip(fields) {
        *slot = parse_f64(path, line, s)?;
    }
    Aabb::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
}

/// Parse an annotation file. `cloud_len` bounds mask indices; pass
/// `usize::MAX` when only proposals are of interest.
pub fn load_annotations(path: &Path, cloud_len: usize) -> Result<Annotations> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::parse(path, ParseErrorKind::BadMagic))?;
    let head: Vec<&str> = first.split_whitespace().collect();
    if head.first() != Some(&ANN_MAGIC) {
        return Err(Error::parse(path, ParseErrorKind::BadMagic));
    }
    if head.get(1) != Some(&VERSION) {
        return Err(Error::parse(
            path,
            ParseErrorKind::UnsupportedVersion(head.get(1).unwrap_or(&"").to_string()),
        ));
    }
    let mut ann = Annotations::default();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["end"] => break,
            ["classes", c] => {
                ann.num_classes = parse_usize(path, lineno, c)?;
            }
            ["gtbox", inst, class, rest @ ..] => {
                ann.gt_boxes.push(GtBox {
                    instance_id: parse_usize(path, lineno, inst)?,
                    class_id: parse_usize(path, lineno, class)?,
                    aabb: parse_aabb(path, lineno, rest)?,
                });
            }
            ["gtmask", inst, class, count, rest @ ..] => {
                let count = parse_usize(path, lineno, count)?;
                if rest.len() != count {
                    return Err(Error::parse(
                        path,
                        ParseErrorKind::Malformed {
                            line: lineno,
                            msg: format!("mask lists {} indices, header says {count}", rest.len()),
                        },
                    ));
                }
                let mut points = Vec::with_capacity(count);
                for s in rest {
                    let i = parse_usize(path, lineno, s)?;
                    if i >= cloud_len {
                        return Err(Error::parse(
                            path,
                            ParseErrorKind::IndexOutOfRange {
                                index: i,
                                len: cloud_len,
                            },
                        ));
                    }
                    points.push(i);
                }
                points.sort_unstable();
                points.dedup();
                ann.gt_masks.push(GtMask {
                    instance_id: parse_usize(path, lineno, inst)?,
                    class_id: parse_usize(path, lineno, class)?,
                    points,
                });
            }
            ["proposal", class, rest @ ..] => {
                if rest.len() < 6 {
                    return Err(Error::parse(
                        path,
                        ParseErrorKind::Malformed {
                            line: lineno,
                            msg: "proposal needs a box and a distribution".into(),
                        },
                    ));
                }
                let aabb = parse_aabb(path, lineno, &rest[..6])?;
                let mut probs = Vec::with_capacity(rest.len() - 6);
                for s in &rest[6..] {
                    probs.push(parse_f64(path, lineno, s)?);
                }
                let class_id = parse_usize(path, lineno, class)?;
                ann.proposals
                    .push(BoxProposal::with_class_id(aabb, probs, class_id)?);
            }
            _ => {
                return Err(Error::parse(
                    path,
                    ParseErrorKind::Malformed {
                        line: lineno,
                        msg: format!("unknown record '{}'", fields[0]),
                    },
                ));
            }
        }
    }
    Ok(ann)
}

/// One mined instance on disk: candidate fields plus its source box, so
/// occupancy can be recomputed without rerunning the miner.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub proposal_id: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub aabb: Aabb,
    pub points: Vec<usize>,
}

impl InstanceRecord {
    pub fn new(candidate: &InstanceCandidate, aabb: Aabb) -> Self {
        Self {
            proposal_id: candidate.proposal_id,
            class_id: candidate.class_id,
            confidence: candidate.confidence,
            aabb,
            points: candidate.points.clone(),
        }
    }

    pub fn to_candidate(&self) -> Result<InstanceCandidate> {
        InstanceCandidate::new(
            self.proposal_id,
            self.class_id,
            self.points.clone(),
            self.confidence,
        )
    }
}

pub fn save_instances(path: &Path, records: &[InstanceRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{INST_MAGIC} {VERSION}\n"));
    for r in records {
        let idx: Vec<String> = r.points.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!(
            "instance {} {} {} {} {} {}\n",
            r.proposal_id,
            r.class_id,
            r.confidence,
            corners(&r.aabb),
            r.points.len(),
            idx.join(" ")
        ));
    }
    out.push_str("end\n");
    fs::write(path, out)?;
    Ok(())
}

pub fn load_instances(path: &Path) -> Result<Vec<InstanceRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::parse(path, ParseErrorKind::BadMagic))?;
    let head: Vec<&str> = first.split_whitespace().collect();
    if head.first() != Some(&INST_MAGIC) {
        return Err(Error::parse(path, ParseErrorKind::BadMagic));
    }
    if head.get(1) != Some(&VERSION) {
        return Err(Error::parse(
            path,
            ParseErrorKind::UnsupportedVersion(head.get(1).unwrap_or(&"").to_string()),
        ));
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["end"] => break,
            ["instance", pid, class, conf, rest @ ..] if rest.len() >= 7 => {
                let aabb = parse_aabb(path, lineno, &rest[..6])?;
                let count = parse_usize(path, lineno, rest[6])?;
                if rest.len() != 7 + count {
                    return Err(Error::parse(
                        path,
                        ParseErrorKind::Malformed {
                            line: lineno,
                            msg: format!(
                                "instance lists {} indices, header says {count}",
                                rest.len() - 7
                            ),
                        },
                    ));
                }
                let mut points = Vec::with_capacity(count);
                for s in &rest[7..] {
                    points.push(parse_usize(path, lineno, s)?);
                }
                records.push(InstanceRecord {
                    proposal_id: parse_usize(path, lineno, pid)?,
                    class_id: parse_usize(path, lineno, class)?,
                    confidence: parse_f64(path, lineno, conf)?,
                    aabb,
                    points,
                });
            }
            _ => {
                return Err(Error::parse(
                    path,
                    ParseErrorKind::Malformed {
                        line: lineno,
                        msg: format!("unknown record '{line}'"),
                    },
                ));
            }
        }
    }
    Ok(records)
}
