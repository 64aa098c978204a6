//! Vector field inequality (VFI) configuration files and constraint assembly.
//!
//! A configuration file is a YAML sequence. Each entry describes one
//! distance constraint between a robot primitive and either an environment
//! primitive (`environment_to_robot`) or a primitive on another (or the same)
//! branch (`robot_to_robot`):
//!
//! ```yaml
//! - vfi_type: environment_to_robot
//!   cs_entity_environment: {name: pillar, position: [0.0, 0.9, 0.0], direction: [0.0, 0.0, 1.0]}
//!   cs_entity_robot: {name: carriage_4, position: [0.0, 0.0, 0.0]}
//!   entity_environment_primitive_type: line
//!   entity_robot_primitive_type: point
//!   robot_index: 4
//!   joint_index: 2
//!   safe_distance: 0.05
//!   direction: keepout
//! - vfi_type: robot_to_robot
//!   cs_entity_one: {position: [0.0, 0.0, 0.0], radius: 0.08}
//!   cs_entity_two: {position: [0.0, 0.0, 0.0], radius: 0.08}
//!   entity_one_primitive_type: sphere
//!   entity_two_primitive_type: sphere
//!   robot_index_one: 2
//!   robot_index_two: 1
//!   joint_index_one: 1
//!   joint_index_two: 1
//!   safe_distance: 0.02
//!   direction: keepout
//! ```
//!
//! Robot and joint indices are one-based: `robot_index: 4, joint_index: 2`
//! is the frame right after the second joint of the fourth branch. Entity
//! maps accept `name`, `position` (point, line anchor, plane anchor or sphere
//! center), `direction` (lines), `normal` (planes) and `radius` (spheres),
//! expressed in the attachment frame (world frame for the environment). An
//! optional `gain` overrides the default VFI gain for that entry.
//!
//! Keepout rows enforce `ḋ ≥ −η_d (d − d_safe)`, keepin rows enforce
//! `ḋ ≤ η_d (d_safe − d)`.

use std::fmt;

use nalgebra::{DMatrix, DVector, Vector3};
use serde_yaml::{Mapping, Value};

use crate::geometry::{shape_distance, Attachment, Feature, GeometryError, Primitive, Shape, ShapeKind};
use crate::chain::ChainFrames;
use crate::system::RobotSystem;

pub const DEFAULT_VFI_GAIN: f64 = 2.0;
pub const DEFAULT_JOINT_LIMIT_GAIN: f64 = 1.0;

const ENV_KEYS: &[&str] = &[
    "vfi_type",
    "cs_entity_environment",
    "cs_entity_robot",
    "entity_environment_primitive_type",
    "entity_robot_primitive_type",
    "robot_index",
    "joint_index",
    "safe_distance",
    "direction",
    "gain",
];

const PAIR_KEYS: &[&str] = &[
    "vfi_type",
    "cs_entity_one",
    "cs_entity_two",
    "entity_one_primitive_type",
    "entity_two_primitive_type",
    "robot_index_one",
    "robot_index_two",
    "joint_index_one",
    "joint_index_two",
    "safe_distance",
    "direction",
    "gain",
];

const ENTITY_KEYS: &[&str] = &["name", "position", "direction", "normal", "radius"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VfiError {
    #[error("line {line}: YAML parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: invalid `{field}`: {message}")]
    InvalidValue { line: usize, field: String, message: String },
    #[error("line {line}: `{field}` = {value} out of range 1..={max}")]
    IndexOutOfRange { line: usize, field: String, value: i64, max: usize },
    #[error("line {line}: {source}")]
    Geometry { line: usize, source: GeometryError },
}

impl VfiError {
    pub fn line(&self) -> usize {
        match self {
            VfiError::Parse { line, .. }
            | VfiError::UnknownKey { line, .. }
            | VfiError::MissingField { line, .. }
            | VfiError::InvalidValue { line, .. }
            | VfiError::IndexOutOfRange { line, .. }
            | VfiError::Geometry { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfiType {
    EnvironmentToRobot,
    RobotToRobot,
}

impl fmt::Display for VfiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VfiType::EnvironmentToRobot => "environment_to_robot",
            VfiType::RobotToRobot => "robot_to_robot",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Keepout,
    Keepin,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Keepout => "keepout",
            Direction::Keepin => "keepin",
        })
    }
}

/// One parsed configuration entry. Indices are stored zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct VfiSpec {
    pub vfi_type: VfiType,
    /// Robot primitive (`cs_entity_robot` or `cs_entity_one`).
    pub first: Primitive,
    /// Environment primitive or `cs_entity_two`.
    pub second: Primitive,
    pub first_name: Option<String>,
    pub second_name: Option<String>,
    pub safe_distance: f64,
    pub direction: Direction,
    pub gain: Option<f64>,
    /// One-based line of the entry in its source file.
    pub line: usize,
}

impl VfiSpec {
    pub fn robot_branches(&self) -> Vec<usize> {
        [self.first.attachment, self.second.attachment]
            .iter()
            .filter_map(|a| match a {
                Attachment::Robot { branch, .. } => Some(*branch),
                Attachment::Environment => None,
            })
            .collect()
    }

    /// Checks indices against a system with the given per-branch DoF.
    pub fn check_bounds(&self, dofs: &[usize]) -> Result<(), VfiError> {
        let names: [(&str, &str); 2] = match self.vfi_type {
            VfiType::EnvironmentToRobot => [("robot_index", "joint_index"), ("", "")],
            VfiType::RobotToRobot => [("robot_index_one", "joint_index_one"), ("robot_index_two", "joint_index_two")],
        };
        for (prim, (rname, jname)) in [self.first, self.second].iter().zip(names) {
            if let Attachment::Robot { branch, joint } = prim.attachment {
                if branch >= dofs.len() {
                    return Err(VfiError::IndexOutOfRange {
                        line: self.line,
                        field: rname.into(),
                        value: branch as i64 + 1,
                        max: dofs.len(),
                    });
                }
                if joint >= dofs[branch] {
                    return Err(VfiError::IndexOutOfRange {
                        line: self.line,
                        field: jname.into(),
                        value: joint as i64 + 1,
                        max: dofs[branch],
                    });
                }
            }
        }
        Ok(())
    }
}

/// Result of linting a file: one outcome per entry plus file-level notes.
#[derive(Debug, Clone, Default)]
pub struct LintReport {
    pub entries: Vec<Result<VfiSpec, VfiError>>,
    pub warnings: Vec<String>,
    /// Document-level failure (the file is not a YAML list).
    pub fatal: Option<VfiError>,
}

impl LintReport {
    pub fn is_valid(&self) -> bool {
        self.fatal.is_none() && self.entries.iter().all(|e| e.is_ok())
    }

    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_ok()).count()
    }
}

/// Parses a configuration and returns the first error, if any.
pub fn parse_vfi_config(text: &str) -> Result<Vec<VfiSpec>, VfiError> {
    let report = lint_vfi_config(text, None);
    if let Some(e) = report.fatal {
        return Err(e);
    }
    report.entries.into_iter().collect()
}

/// Parses and bounds-checks against per-branch DoF counts.
pub fn parse_vfi_config_for(text: &str, dofs: &[usize]) -> Result<Vec<VfiSpec>, VfiError> {
    let report = lint_vfi_config(text, Some(dofs));
    if let Some(e) = report.fatal {
        return Err(e);
    }
    report.entries.into_iter().collect()
}

/// Validates every entry independently so all problems are reported.
pub fn lint_vfi_config(text: &str, dofs: Option<&[usize]>) -> LintReport {
    let mut report = LintReport::default();
    let doc: Value = match serde_yaml::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            let line = e.location().map_or(1, |l| l.line());
            report.fatal = Some(VfiError::Parse { line, message: e.to_string() });
            return report;
        }
    };
    let items = match doc {
        Value::Null => {
            report.warnings.push("file contains no VFI entries".into());
            return report;
        }
        Value::Sequence(items) => items,
        _ => {
            report.fatal = Some(VfiError::Parse { line: 1, message: "expected a list of VFI entries".into() });
            return report;
        }
    };
    if items.is_empty() {
        report.warnings.push("file contains no VFI entries".into());
    }
    let lines = LineIndex::new(text, items.len());
    for (i, item) in items.iter().enumerate() {
        let entry = parse_entry(item, &lines.entry(i)).and_then(|spec| {
            if let Some(d) = dofs {
                spec.check_bounds(d)?;
            }
            Ok(spec)
        });
        report.entries.push(entry);
    }
    report
}

/// Approximate source positions for entries and keys of a top-level list.
struct LineIndex<'a> {
    lines: Vec<&'a str>,
    starts: Vec<usize>,
}

struct EntryLines<'a> {
    lines: &'a [&'a str],
    first: usize,
}

impl<'a> LineIndex<'a> {
    fn new(text: &'a str, count: usize) -> Self {
        let lines: Vec<&str> = text.lines().collect();
        let dash = |l: &str| {
            let t = l.trim_start();
            (t.starts_with("- ") || t == "-").then(|| l.len() - t.len())
        };
        let min_indent = lines.iter().filter_map(|l| dash(l)).min();
        let starts: Vec<usize> = match min_indent {
            Some(ind) => lines.iter().enumerate().filter(|(_, l)| dash(l) == Some(ind)).map(|(i, _)| i).collect(),
            None => Vec::new(),
        };
        let starts = if starts.len() == count { starts } else { vec![0; count] };
        LineIndex { lines, starts }
    }

    fn entry(&self, i: usize) -> EntryLines<'_> {
        let first = self.starts.get(i).copied().unwrap_or(0);
        let end = self.starts.get(i + 1).copied().unwrap_or(self.lines.len()).max(first + 1).min(self.lines.len());
        EntryLines { lines: &self.lines[first.min(end)..end], first }
    }
}

impl EntryLines<'_> {
    fn start(&self) -> usize {
        self.first + 1
    }

    fn key(&self, key: &str) -> usize {
        let pat = format!("{key}:");
        self.lines
            .iter()
            .position(|l| {
                let t = l.trim_start().trim_start_matches("- ");
                t.starts_with(&pat) || l.contains(&format!(" {pat}")) || l.contains(&format!("{{{pat}"))
            })
            .map_or(self.start(), |p| self.first + p + 1)
    }
}

fn parse_entry(item: &Value, lines: &EntryLines<'_>) -> Result<VfiSpec, VfiError> {
    let map = item.as_mapping().ok_or_else(|| VfiError::InvalidValue {
        line: lines.start(),
        field: "entry".into(),
        message: "each VFI entry must be a mapping".into(),
    })?;
    let entry = Entry { map, lines };
    let vfi_type = match entry.string("vfi_type")?.as_str() {
        "environment_to_robot" => VfiType::EnvironmentToRobot,
        "robot_to_robot" => VfiType::RobotToRobot,
        other => {
            return Err(entry.invalid("vfi_type", format!("expected environment_to_robot or robot_to_robot, got `{other}`")))
        }
    };
    let allowed = match vfi_type {
        VfiType::EnvironmentToRobot => ENV_KEYS,
        VfiType::RobotToRobot => PAIR_KEYS,
    };
    entry.reject_unknown(allowed)?;

    let safe_distance = entry.number("safe_distance")?;
    if !(safe_distance > 0.0) {
        return Err(entry.invalid("safe_distance", format!("must be positive, got {safe_distance}")));
    }
    let direction = match entry.string("direction")?.as_str() {
        "keepout" => Direction::Keepout,
        "keepin" => Direction::Keepin,
        other => return Err(entry.invalid("direction", format!("expected keepout or keepin, got `{other}`"))),
    };
    let gain = match map.get("gain") {
        None => None,
        Some(_) => {
            let g = entry.number("gain")?;
            if !(g > 0.0) {
                return Err(entry.invalid("gain", format!("must be positive, got {g}")));
            }
            Some(g)
        }
    };

    let (first, first_name, second, second_name) = match vfi_type {
        VfiType::EnvironmentToRobot => {
            let attachment = Attachment::Robot {
                branch: entry.index("robot_index")?,
                joint: entry.index("joint_index")?,
            };
            let (robot, rn) = entry.primitive("cs_entity_robot", "entity_robot_primitive_type", attachment)?;
            let (env, en) =
                entry.primitive("cs_entity_environment", "entity_environment_primitive_type", Attachment::Environment)?;
            (robot, rn, env, en)
        }
        VfiType::RobotToRobot => {
            let a1 = Attachment::Robot {
                branch: entry.index("robot_index_one")?,
                joint: entry.index("joint_index_one")?,
            };
            let a2 = Attachment::Robot {
                branch: entry.index("robot_index_two")?,
                joint: entry.index("joint_index_two")?,
            };
            let (one, n1) = entry.primitive("cs_entity_one", "entity_one_primitive_type", a1)?;
            let (two, n2) = entry.primitive("cs_entity_two", "entity_two_primitive_type", a2)?;
            (one, n1, two, n2)
        }
    };
    // Reject pairs the distance code cannot evaluate at load time.
    shape_distance(&first.shape, &second.shape).map_err(|source| VfiError::Geometry { line: lines.start(), source })?;
    Ok(VfiSpec {
        vfi_type,
        first,
        second,
        first_name,
        second_name,
        safe_distance,
        direction,
        gain,
        line: lines.start(),
    })
}

struct Entry<'a> {
    map: &'a Mapping,
    lines: &'a EntryLines<'a>,
}

impl Entry<'_> {
    fn get(&self, key: &str) -> Result<&Value, VfiError> {
        self.map
            .get(key)
            .ok_or_else(|| VfiError::MissingField { line: self.lines.start(), field: key.into() })
    }

    fn invalid(&self, key: &str, message: String) -> VfiError {
        VfiError::InvalidValue { line: self.lines.key(key), field: key.into(), message }
    }

    fn reject_unknown(&self, allowed: &[&str]) -> Result<(), VfiError> {
        for k in self.map.keys() {
            let name = k.as_str().map(str::to_string).unwrap_or_else(|| format!("{k:?}"));
            if !allowed.contains(&name.as_str()) {
                return Err(VfiError::UnknownKey { line: self.lines.key(&name), key: name });
            }
        }
        Ok(())
    }

    fn string(&self, key: &str) -> Result<String, VfiError> {
        self.get(key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.invalid(key, "expected a string".into()))
    }

    fn number(&self, key: &str) -> Result<f64, VfiError> {
        let v = self.get(key)?.as_f64().ok_or_else(|| self.invalid(key, "expected a number".into()))?;
        if !v.is_finite() {
            return Err(self.invalid(key, "must be finite".into()));
        }
        Ok(v)
    }

    /// One-based index in the file, zero-based in the result.
    fn index(&self, key: &str) -> Result<usize, VfiError> {
        let v = self.get(key)?.as_i64().ok_or_else(|| self.invalid(key, "expected an integer".into()))?;
        if v < 1 {
            return Err(self.invalid(key, format!("indices are one-based, got {v}")));
        }
        Ok(v as usize - 1)
    }

    fn primitive(
        &self,
        entity_key: &str,
        type_key: &str,
        attachment: Attachment,
    ) -> Result<(Primitive, Option<String>), VfiError> {
        let kind = match self.string(type_key)?.as_str() {
            "point" => ShapeKind::Point,
            "line" => ShapeKind::Line,
            "plane" => ShapeKind::Plane,
            "sphere" => ShapeKind::Sphere,
            other => return Err(self.invalid(type_key, format!("unknown primitive type `{other}`"))),
        };
        let entity = self
            .get(entity_key)?
            .as_mapping()
            .ok_or_else(|| self.invalid(entity_key, "expected a mapping".into()))?;
        for k in entity.keys() {
            let name = k.as_str().unwrap_or("<non-string>");
            if !ENTITY_KEYS.contains(&name) {
                return Err(VfiError::UnknownKey { line: self.lines.key(name), key: name.to_string() });
            }
        }
        let field = |name: &str| format!("{entity_key}.{name}");
        let vec3 = |name: &str, required: bool| -> Result<Option<Vector3<f64>>, VfiError> {
            let Some(v) = entity.get(name) else {
                return if required {
                    Err(VfiError::MissingField { line: self.lines.key(entity_key), field: field(name) })
                } else {
                    Ok(None)
                };
            };
            let seq = v.as_sequence().filter(|s| s.len() == 3);
            let vals: Option<Vec<f64>> = seq.map(|s| s.iter().filter_map(Value::as_f64).collect());
            match vals {
                Some(v) if v.len() == 3 && v.iter().all(|x| x.is_finite()) => Ok(Some(Vector3::new(v[0], v[1], v[2]))),
                _ => Err(VfiError::InvalidValue {
                    line: self.lines.key(name),
                    field: field(name),
                    message: "expected a list of three numbers".into(),
                }),
            }
        };
        let forbid = |name: &str| -> Result<(), VfiError> {
            if entity.contains_key(name) {
                return Err(VfiError::InvalidValue {
                    line: self.lines.key(name),
                    field: field(name),
                    message: format!("not a parameter of a {kind}"),
                });
            }
            Ok(())
        };
        let position = vec3("position", true)?.unwrap_or_else(Vector3::zeros);
        let geo = |e: GeometryError| VfiError::Geometry { line: self.lines.key(entity_key), source: e };
        let shape = match kind {
            ShapeKind::Point => {
                forbid("direction")?;
                forbid("normal")?;
                forbid("radius")?;
                Shape::point(position)
            }
            ShapeKind::Line => {
                forbid("normal")?;
                forbid("radius")?;
                Shape::line(position, vec3("direction", true)?.unwrap()).map_err(geo)?
            }
            ShapeKind::Plane => {
                forbid("direction")?;
                forbid("radius")?;
                Shape::plane(position, vec3("normal", true)?.unwrap()).map_err(geo)?
            }
            ShapeKind::Sphere => {
                forbid("direction")?;
                forbid("normal")?;
                let r = entity
                    .get("radius")
                    .ok_or_else(|| VfiError::MissingField { line: self.lines.key(entity_key), field: field("radius") })?
                    .as_f64()
                    .ok_or_else(|| VfiError::InvalidValue {
                        line: self.lines.key("radius"),
                        field: field("radius"),
                        message: "expected a number".into(),
                    })?;
                Shape::sphere(position, r).map_err(geo)?
            }
        };
        let name = entity.get("name").and_then(Value::as_str).map(str::to_string);
        Ok((Primitive { shape, attachment }, name))
    }
}

/// Where a constraint row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowSource {
    JointLower { branch: usize, joint: usize },
    JointUpper { branch: usize, joint: usize },
    VelocityLower { branch: usize, joint: usize },
    VelocityUpper { branch: usize, joint: usize },
    Vfi { spec: usize },
}

/// Distance information recorded for one VFI while building its row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VfiReading {
    pub spec: usize,
    pub distance: f64,
    pub safe_distance: f64,
    pub direction: Direction,
}

/// The inequality sets `W_s q̇ ≤ w_s` (single-branch) and `W_p q̇ ≤ w_p`
/// (pairwise), both written over the stacked joint velocity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub ws: DMatrix<f64>,
    pub w_s: DVector<f64>,
    pub wp: DMatrix<f64>,
    pub w_p: DVector<f64>,
    pub source_s: Vec<RowSource>,
    pub source_p: Vec<RowSource>,
    /// One reading per VFI spec, in spec order.
    pub readings: Vec<VfiReading>,
}

impl ConstraintSet {
    /// `A = [W_s; W_p]`, `b = [w_s; w_p]`.
    pub fn stacked(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.ws.ncols();
        let (ms, mp) = (self.ws.nrows(), self.wp.nrows());
        let mut a = DMatrix::zeros(ms + mp, n);
        a.view_mut((0, 0), (ms, n)).copy_from(&self.ws);
        a.view_mut((ms, 0), (mp, n)).copy_from(&self.wp);
        let mut b = DVector::zeros(ms + mp);
        b.rows_mut(0, ms).copy_from(&self.w_s);
        b.rows_mut(ms, mp).copy_from(&self.w_p);
        (a, b)
    }

    pub fn min_keepout_margin(&self) -> Option<f64> {
        self.readings
            .iter()
            .filter(|r| r.direction == Direction::Keepout)
            .map(|r| r.distance - r.safe_distance)
            .reduce(f64::min)
    }
}

/// Gains for the inequality rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintGains {
    pub vfi: f64,
    pub joint_limit: f64,
}

impl Default for ConstraintGains {
    fn default() -> Self {
        ConstraintGains { vfi: DEFAULT_VFI_GAIN, joint_limit: DEFAULT_JOINT_LIMIT_GAIN }
    }
}

/// One VFI row over the stacked velocities: `(row, bound, distance)`.
pub fn build_constraint(
    spec: &VfiSpec,
    system: &RobotSystem,
    frames: &[ChainFrames],
    default_gain: f64,
) -> Result<(DVector<f64>, f64, f64), GeometryError> {
    let n = system.total_dof();
    let feature = |p: &Primitive| -> Result<(Feature, Option<usize>), GeometryError> {
        match p.attachment {
            Attachment::Environment => Ok((Feature::fixed(p.shape, 0), None)),
            Attachment::Robot { branch, joint } => {
                let chain = system.branch(branch).ok_or_else(|| {
                    GeometryError::AttachmentMismatch(format!("branch {} does not exist", branch + 1))
                })?;
                Ok((Feature::attached(chain, &frames[branch], &p.shape, joint)?, Some(branch)))
            }
        }
    };
    let (fa, ba) = feature(&spec.first)?;
    let (fb, bb) = feature(&spec.second)?;
    let res = shape_distance(&fa.world, &fb.world)?;
    let mut jd = DVector::zeros(n);
    for (f, b, g) in [(&fa, ba, &res.grad_a), (&fb, bb, &res.grad_b)] {
        if let Some(b) = b {
            let part = f.project(g);
            let off = system.offset(b);
            let mut view = jd.rows_mut(off, part.len());
            view += &part;
        }
    }
    let eta = spec.gain.unwrap_or(default_gain);
    let d = res.distance;
    Ok(match spec.direction {
        Direction::Keepout => (-jd, eta * (d - spec.safe_distance), d),
        Direction::Keepin => (jd, eta * (spec.safe_distance - d), d),
    })
}

/// Builds `(W_s, w_s, W_p, w_p)` for the current joint state.
///
/// Per branch, `W_s` holds position-limit rows for every joint (lower then
/// upper), velocity rows (lower then upper), then that branch's
/// environment VFIs in file order. `W_p` holds every `robot_to_robot` VFI in
/// file order.
pub fn assemble(
    specs: &[VfiSpec],
    system: &RobotSystem,
    q: &[f64],
    gains: ConstraintGains,
) -> Result<ConstraintSet, GeometryError> {
    let frames = system.frames(q)?;
    let n = system.total_dof();
    let mut rows_s: Vec<(DVector<f64>, f64, RowSource)> = Vec::new();
    let mut rows_p: Vec<(DVector<f64>, f64, RowSource)> = Vec::new();
    let mut readings = vec![None; specs.len()];

    let mut vfi_rows: Vec<Option<(DVector<f64>, f64)>> = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (row, bound, d) = build_constraint(spec, system, &frames, gains.vfi)?;
        readings[i] = Some(VfiReading {
            spec: i,
            distance: d,
            safe_distance: spec.safe_distance,
            direction: spec.direction,
        });
        vfi_rows.push(Some((row, bound)));
    }

    for (b, chain) in system.branches().iter().enumerate() {
        use crate::chain::Kinematics;
        let off = system.offset(b);
        let qb = system.slice(q, b);
        let unit = |j: usize, sign: f64| {
            let mut r = DVector::zeros(n);
            r[off + j] = sign;
            r
        };
        let joints = chain.joints();
        for (j, jd) in joints.iter().enumerate() {
            rows_s.push((unit(j, -1.0), gains.joint_limit * (qb[j] - jd.q_min), RowSource::JointLower { branch: b, joint: j }));
            rows_s.push((unit(j, 1.0), gains.joint_limit * (jd.q_max - qb[j]), RowSource::JointUpper { branch: b, joint: j }));
        }
        for (j, jd) in joints.iter().enumerate() {
            rows_s.push((unit(j, -1.0), jd.velocity_limit, RowSource::VelocityLower { branch: b, joint: j }));
            rows_s.push((unit(j, 1.0), jd.velocity_limit, RowSource::VelocityUpper { branch: b, joint: j }));
        }
        for (i, spec) in specs.iter().enumerate() {
            if spec.vfi_type == VfiType::EnvironmentToRobot && spec.robot_branches() == [b] {
                let (row, bound) = vfi_rows[i].take().expect("each VFI row is placed once");
                rows_s.push((row, bound, RowSource::Vfi { spec: i }));
            }
        }
    }
    for (i, spec) in specs.iter().enumerate() {
        if spec.vfi_type == VfiType::RobotToRobot {
            let (row, bound) = vfi_rows[i].take().expect("each VFI row is placed once");
            rows_p.push((row, bound, RowSource::Vfi { spec: i }));
        }
    }

    let pack = |rows: Vec<(DVector<f64>, f64, RowSource)>| {
        let m = rows.len();
        let mut w = DMatrix::zeros(m, n);
        let mut bnd = DVector::zeros(m);
        let mut src = Vec::with_capacity(m);
        for (k, (r, b, s)) in rows.into_iter().enumerate() {
            w.row_mut(k).copy_from(&r.transpose());
            bnd[k] = b;
            src.push(s);
        }
        (w, bnd, src)
    };
    let (ws, w_s, source_s) = pack(rows_s);
    let (wp, w_p, source_p) = pack(rows_p);
    Ok(ConstraintSet {
        ws,
        w_s,
        wp,
        w_p,
        source_s,
        source_p,
        readings: readings.into_iter().map(|r| r.expect("every spec has a reading")).collect(),
    })
}
