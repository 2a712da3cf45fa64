//! Scenario documents: JSON schema, strict/lenient loading, validation and
//! canonical serialization.

use std::path::Path;
use std::sync::Arc;

use diffcontact_core::model::{
    pack_params, Body, BodyInit, BodyKind, CfdParams, ContactParams, Geom, ParamSlot, ParamVector, Scene, Shape,
    Solimp, Solref, Transform,
};
use diffcontact_core::ModelError;
use serde::{Deserialize, Serialize};

use crate::task::TaskDoc;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {message} (line {line}, column {column})")]
    Parse {
        path: String,
        message: String,
        line: usize,
        column: usize,
    },
    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("{0}")]
    Invalid(#[from] ModelError),
    #[error("unknown bundled scenario `{0}`")]
    UnknownBundled(String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactDoc {
    pub solref: [f64; 2],
    pub solimp: [f64; 5],
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_friction_eps")]
    pub friction_eps: f64,
}

fn default_mu() -> f64 {
    ContactParams::default().mu
}

fn default_friction_eps() -> f64 {
    ContactParams::default().friction_eps
}

impl Default for ContactDoc {
    fn default() -> Self {
        ContactDoc::from(&ContactParams::default())
    }
}

impl From<&ContactParams> for ContactDoc {
    fn from(c: &ContactParams) -> Self {
        ContactDoc {
            solref: [c.solref.time_const, c.solref.damping_ratio],
            solimp: [c.solimp.d0, c.solimp.dwidth, c.solimp.width, c.solimp.midpoint, c.solimp.power],
            mu: c.mu,
            friction_eps: c.friction_eps,
        }
    }
}

impl From<&ContactDoc> for ContactParams {
    fn from(c: &ContactDoc) -> Self {
        ContactParams {
            solref: Solref {
                time_const: c.solref[0],
                damping_ratio: c.solref[1],
            },
            solimp: Solimp {
                d0: c.solimp[0],
                dwidth: c.solimp[1],
                width: c.solimp[2],
                midpoint: c.solimp[3],
                power: c.solimp[4],
            },
            mu: c.mu,
            friction_eps: c.friction_eps,
        }
    }
}

/// `solimp_cfd` is `(d_c, d_0, w_c, m_c, p_c)`. `softplus_beta` defaults to `8 / w_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfdDoc {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_solimp_cfd")]
    pub solimp_cfd: [f64; 5],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub softplus_beta: Option<f64>,
}

fn default_solimp_cfd() -> [f64; 5] {
    let c = CfdParams::default();
    [c.d_c, c.d_0, c.width, c.midpoint, c.power]
}

impl Default for CfdDoc {
    fn default() -> Self {
        CfdDoc {
            enabled: false,
            solimp_cfd: default_solimp_cfd(),
            softplus_beta: None,
        }
    }
}

impl CfdDoc {
    fn to_params(&self) -> CfdParams {
        let [d_c, d_0, width, midpoint, power] = self.solimp_cfd;
        CfdParams {
            enabled: self.enabled,
            d_c,
            d_0,
            width,
            midpoint,
            power,
            softplus_beta: self.softplus_beta.unwrap_or(8.0 / width),
        }
    }

    fn from_params(c: &CfdParams) -> Self {
        CfdDoc {
            enabled: c.enabled,
            solimp_cfd: [c.d_c, c.d_0, c.width, c.midpoint, c.power],
            softplus_beta: Some(c.softplus_beta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindDoc {
    PointMass,
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<[f64; 3]>,
    #[serde(default = "default_kind")]
    pub kind: KindDoc,
    #[serde(default)]
    pub pos: [f64; 3],
    #[serde(default = "identity_quat")]
    pub quat: [f64; 4],
    #[serde(default)]
    pub vel: [f64; 3],
    #[serde(default)]
    pub angvel: [f64; 3],
}

fn default_kind() -> KindDoc {
    KindDoc::Free
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ShapeDoc {
    Plane {
        normal: [f64; 3],
        #[serde(default)]
        offset: f64,
    },
    Sphere {
        radius: f64,
    },
    /// Axis-aligned cube of side `side`, stored as a corner set.
    Cube {
        side: f64,
    },
    Corners {
        points: Vec<[f64; 3]>,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub shape: ShapeDoc,
    /// Body index, `-1` for the static world.
    #[serde(default = "world")]
    pub body: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<ContactDoc>,
}

fn world() -> i64 {
    -1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TransformDoc {
    Identity,
    Softplus {
        #[serde(default = "one")]
        sharpness: f64,
    },
    Softclip {
        lo: f64,
        hi: f64,
        #[serde(default = "one")]
        sharpness: f64,
    },
}

impl From<&TransformDoc> for Transform {
    fn from(t: &TransformDoc) -> Self {
        match *t {
            TransformDoc::Identity => Transform::Identity,
            TransformDoc::Softplus { sharpness } => Transform::Softplus { sharpness },
            TransformDoc::Softclip { lo, hi, sharpness } => Transform::Softclip { lo, hi, sharpness },
        }
    }
}

impl From<&Transform> for TransformDoc {
    fn from(t: &Transform) -> Self {
        match *t {
            Transform::Identity => TransformDoc::Identity,
            Transform::Softplus { sharpness } => TransformDoc::Softplus { sharpness },
            Transform::Softclip { lo, hi, sharpness } => TransformDoc::Softclip { lo, hi, sharpness },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotDoc {
    pub name: String,
    pub path: String,
    #[serde(default = "identity_transform")]
    pub transform: TransformDoc,
}

fn identity_transform() -> TransformDoc {
    TransformDoc::Identity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub bodies: Vec<BodyDoc>,
    pub geoms: Vec<GeomDoc>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    pub outer_dt: f64,
    #[serde(default)]
    pub contact_defaults: ContactDoc,
    #[serde(default)]
    pub cfd: CfdDoc,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub param_slots: Vec<SlotDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskDoc>,
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

/// A validated scenario: the scene plus its declared parameter slots and task.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub scene: Scene,
    pub slots: Vec<ParamSlot>,
    pub task: TaskDoc,
    /// Keys ignored in lenient mode.
    pub warnings: Vec<String>,
}

impl Scenario {
    pub fn params(&self) -> Result<ParamVector, ModelError> {
        pack_params(&self.scene, &self.slots)
    }

    pub fn to_doc(&self) -> ScenarioDoc {
        let s = &self.scene;
        ScenarioDoc {
            name: Some(self.name.clone()),
            description: None,
            bodies: s
                .bodies
                .iter()
                .map(|b| BodyDoc {
                    name: b.name.as_deref().map(str::to_string),
                    mass: b.mass,
                    inertia: b.inertia,
                    kind: match b.kind {
                        BodyKind::PointMass => KindDoc::PointMass,
                        BodyKind::Free => KindDoc::Free,
                    },
                    pos: b.init.pos,
                    quat: b.init.quat,
                    vel: b.init.vel,
                    angvel: b.init.angvel,
                })
                .collect(),
            geoms: s
                .geoms
                .iter()
                .map(|g| GeomDoc {
                    name: g.name.as_deref().map(str::to_string),
                    shape: match &g.shape {
                        Shape::Plane { normal, offset } => ShapeDoc::Plane {
                            normal: *normal,
                            offset: *offset,
                        },
                        Shape::Sphere { radius } => ShapeDoc::Sphere { radius: *radius },
                        Shape::Corners { points, scale } => ShapeDoc::Corners {
                            points: points.to_vec(),
                            scale: *scale,
                        },
                    },
                    body: g.body.map_or(-1, |b| b as i64),
                    contact: g.contact.as_ref().map(ContactDoc::from),
                })
                .collect(),
            gravity: s.gravity,
            outer_dt: s.outer_dt,
            contact_defaults: ContactDoc::from(&s.contact_defaults),
            cfd: CfdDoc::from_params(&s.cfd),
            param_slots: self
                .slots
                .iter()
                .map(|p| SlotDoc {
                    name: p.name.clone(),
                    path: p.path.clone(),
                    transform: TransformDoc::from(&p.transform),
                })
                .collect(),
            task: Some(self.task.clone()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("scenario documents always serialize")
    }
}

impl ScenarioDoc {
    pub fn into_scenario(self, warnings: Vec<String>) -> Result<Scenario, ScenarioError> {
        let mut geoms = Vec::with_capacity(self.geoms.len());
        for (i, g) in self.geoms.iter().enumerate() {
            let body = match g.body {
                -1 => None,
                b if b >= 0 => Some(b as usize),
                b => {
                    return Err(ModelError::Invalid {
                        field: format!("geoms[{i}].body"),
                        reason: format!("body index {b} is neither -1 nor a body"),
                    }
                    .into())
                }
            };
            let shape = match &g.shape {
                ShapeDoc::Plane { normal, offset } => Shape::Plane {
                    normal: *normal,
                    offset: *offset,
                },
                ShapeDoc::Sphere { radius } => Shape::Sphere { radius: *radius },
                ShapeDoc::Cube { side } => Shape::cube(*side),
                ShapeDoc::Corners { points, scale } => Shape::Corners {
                    points: points.clone().into(),
                    scale: *scale,
                },
            };
            geoms.push(Geom {
                name: g.name.as_deref().map(Arc::from),
                shape,
                body,
                contact: g.contact.as_ref().map(ContactParams::from),
            });
        }
        let scene = Scene {
            bodies: self
                .bodies
                .iter()
                .map(|b| Body {
                    name: b.name.as_deref().map(Arc::from),
                    mass: b.mass,
                    inertia: b.inertia,
                    kind: match b.kind {
                        KindDoc::PointMass => BodyKind::PointMass,
                        KindDoc::Free => BodyKind::Free,
                    },
                    init: BodyInit {
                        pos: b.pos,
                        quat: b.quat,
                        vel: b.vel,
                        angvel: b.angvel,
                    },
                })
                .collect(),
            geoms,
            gravity: self.gravity,
            contact_defaults: ContactParams::from(&self.contact_defaults),
            cfd: self.cfd.to_params(),
            outer_dt: self.outer_dt,
        };
        scene.validate()?;
        let slots: Vec<ParamSlot> = self
            .param_slots
            .iter()
            .map(|s| ParamSlot {
                name: s.name.clone(),
                path: s.path.clone(),
                transform: Transform::from(&s.transform),
            })
            .collect();
        pack_params(&scene, &slots)?;
        Ok(Scenario {
            name: self.name.unwrap_or_else(|| "scenario".into()),
            scene,
            slots,
            task: self.task.unwrap_or_default(),
            warnings,
        })
    }
}

/// Parses and validates a scenario document. Unknown keys are an error
/// unless `lenient`, in which case they are returned as warnings.
pub fn load_scene(text: &str, lenient: bool) -> Result<Scenario, ScenarioError> {
    let mut ignored = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let doc: ScenarioDoc = {
        let mut record = |p: serde_ignored::Path<'_>| ignored.push(p.to_string());
        let de = serde_ignored::Deserializer::new(&mut de, &mut record);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ScenarioError::Parse {
                path,
                message: inner.to_string(),
                line: inner.line(),
                column: inner.column(),
            }
        })?
    };
    de.end().map_err(|e| ScenarioError::Parse {
        path: ".".into(),
        message: e.to_string(),
        line: e.line(),
        column: e.column(),
    })?;
    if !ignored.is_empty() && !lenient {
        return Err(ScenarioError::UnknownKeys(ignored));
    }
    doc.into_scenario(ignored)
}

pub fn load_file(path: &Path, lenient: bool) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.display().to_string(), e))?;
    load_scene(&text, lenient)
}

pub const BUNDLED: [(&str, &str); 5] = [
    ("toy1d", include_str!("../scenarios/toy1d.json")),
    ("sphere_toss", include_str!("../scenarios/sphere_toss.json")),
    ("cube_toss", include_str!("../scenarios/cube_toss.json")),
    ("billiard", include_str!("../scenarios/billiard.json")),
    ("billiard_nocontact", include_str!("../scenarios/billiard_nocontact.json")),
];

pub fn bundled(name: &str) -> Result<Scenario, ScenarioError> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| ScenarioError::UnknownBundled(name.into()))?;
    load_scene(text, false)
}

/// A bundled scenario name or a path to a scenario file.
pub fn resolve(name_or_path: &str, lenient: bool) -> Result<Scenario, ScenarioError> {
    if BUNDLED.iter().any(|(n, _)| *n == name_or_path) {
        bundled(name_or_path)
    } else {
        load_file(Path::new(name_or_path), lenient)
    }
}
