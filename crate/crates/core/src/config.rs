//! Run configuration: flat INI sections with `key = value` lines.
//!
//! Every key has a default in `assets/defaults.ini`; a run file overrides
//! any subset. Unknown sections and keys are errors.

use crate::assembly::MaterialSpec;
use crate::error::{Error, Result};
use crate::expr::{Expr, ForcingSpec};
use crate::forcing::TwoScaleForcing;
use crate::mesh::{CellGeometry, InclusionShape, Point, Rect};
use crate::tensor::ElasticityTensor4;
use nalgebra::Matrix3;
use std::collections::BTreeMap;
use std::path::Path;

/// The committed defaults file.
pub const DEFAULTS: &str = include_str!("../assets/defaults.ini");

const KEYS: &[(&str, &[&str])] = &[
    ("geometry", &["shape", "center", "size", "cell_res", "cells_res", "macro_n", "domain"]),
    ("material", &["matrix_lambda", "matrix_mu", "matrix_voigt", "inclusion_lambda", "inclusion_mu_scale"]),
    ("solver", &["cg_tol", "cg_max_iter", "minres_tol", "eig_tol", "deterministic", "workers", "seed"]),
    ("experiment", &["alpha", "f0", "f1", "frot", "epsilon", "window", "k"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryConfig {
    pub shape: ShapeKind,
    pub center: Point,
    /// Radius of a disk, half width of a square.
    pub size: f64,
    pub cell_res: usize,
    pub cells_res: usize,
    pub macro_n: usize,
    pub domain: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialConfig {
    pub matrix_lambda: f64,
    pub matrix_mu: f64,
    pub matrix_voigt: Option<[f64; 9]>,
    pub inclusion_lambda: f64,
    pub inclusion_mu_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub minres_tol: f64,
    pub eig_tol: f64,
    pub deterministic: bool,
    pub workers: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub forcing: ForcingSpec,
    /// `1/eps` for every entry of the sweep.
    pub inverse_epsilon: Vec<usize>,
    /// `None` selects the second Stokes eigenvalue plus 10%.
    pub window: Option<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub material: MaterialConfig,
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
}

/// A raw value with its position.
struct Entry {
    value: String,
    line: usize,
    column: usize,
}

type Sections = BTreeMap<String, BTreeMap<String, Entry>>;

fn scan(text: &str, allow_unknown: bool) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = content.len() - content.trim_start().len();
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or(Error::Parse { line, column: indent + 1, msg: "unterminated section header".into() })?
                .trim();
            if !allow_unknown && !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(Error::UnknownKey(format!("[{name}]")));
            }
            out.entry(name.to_string()).or_default();
            section = Some(name.to_string());
            continue;
        }
        let eq = content
            .find('=')
            .ok_or(Error::Parse { line, column: indent + 1, msg: "expected `key = value`".into() })?;
        let key = content[..eq].trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Parse { line, column: indent + 1, msg: format!("bad key `{key}`") });
        }
        let sec = section
            .clone()
            .ok_or(Error::Parse { line, column: indent + 1, msg: "key outside of a section".into() })?;
        if !allow_unknown && !KEYS.iter().any(|(s, ks)| *s == sec && ks.contains(&key)) {
            return Err(Error::UnknownKey(format!("{sec}.{key}")));
        }
        let vstart = eq + 1 + (content[eq + 1..].len() - content[eq + 1..].trim_start().len());
        let value = content[eq + 1..].trim().to_string();
        let map = out.entry(sec.clone()).or_default();
        if map.contains_key(key) {
            return Err(Error::Parse { line, column: indent + 1, msg: format!("duplicate key `{sec}.{key}`") });
        }
        map.insert(key.to_string(), Entry { value, line, column: vstart + 1 });
    }
    Ok(out)
}

struct Reader {
    sections: Sections,
}

impl Reader {
    fn get(&self, sec: &str, key: &str) -> &Entry {
        &self.sections[sec][key]
    }

    fn invalid(sec: &str, key: &str, msg: impl Into<String>) -> Error {
        Error::InvalidValue { key: format!("{sec}.{key}"), msg: msg.into() }
    }

    fn f64(&self, sec: &str, key: &str) -> Result<f64> {
        let e = self.get(sec, key);
        parse_number(&e.value).ok_or_else(|| Self::invalid(sec, key, format!("`{}` is not a number", e.value)))
    }

    fn positive(&self, sec: &str, key: &str) -> Result<f64> {
        let v = self.f64(sec, key)?;
        if !(v > 0.0) {
            return Err(Self::invalid(sec, key, "must be > 0"));
        }
        Ok(v)
    }

    fn usize(&self, sec: &str, key: &str, min: usize) -> Result<usize> {
        let e = self.get(sec, key);
        let v: usize = e.value.parse().map_err(|_| Self::invalid(sec, key, format!("`{}` is not an integer", e.value)))?;
        if v < min {
            return Err(Self::invalid(sec, key, format!("must be >= {min}")));
        }
        Ok(v)
    }

    fn bool(&self, sec: &str, key: &str) -> Result<bool> {
        match self.get(sec, key).value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Self::invalid(sec, key, format!("`{other}` is not true/false"))),
        }
    }

    fn list(&self, sec: &str, key: &str) -> Result<Vec<String>> {
        let v = &self.get(sec, key).value;
        let inner = v
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| Self::invalid(sec, key, "expected a bracketed list"))?;
        if inner.trim().is_empty() {
            return Ok(vec![]);
        }
        Ok(inner.split(',').map(|s| s.trim().to_string()).collect())
    }

    fn numbers(&self, sec: &str, key: &str, n: usize) -> Result<Vec<f64>> {
        let items = self.list(sec, key)?;
        if items.len() != n {
            return Err(Self::invalid(sec, key, format!("expected {n} entries")));
        }
        items
            .iter()
            .map(|s| parse_number(s).ok_or_else(|| Self::invalid(sec, key, format!("`{s}` is not a number"))))
            .collect()
    }

    fn is_none(&self, sec: &str, key: &str) -> bool {
        self.get(sec, key).value == "none"
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let v: f64 = s.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

/// `1/n` or a decimal that is the reciprocal of an integer.
fn parse_inverse_epsilon(s: &str) -> Option<usize> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let a: f64 = a.trim().parse().ok()?;
        let b: f64 = b.trim().parse().ok()?;
        return reciprocal(a / b);
    }
    reciprocal(s.parse().ok()?)
}

fn reciprocal(eps: f64) -> Option<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return None;
    }
    let m = (1.0 / eps).round();
    ((1.0 / eps - m).abs() <= 1e-9 * m).then_some(m as usize)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse_str("").expect("committed defaults parse")
    }
}

impl RunConfig {
    /// Defaults overlaid with `text`.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut sections = scan(DEFAULTS, false)?;
        for (sec, keys) in scan(text, false)? {
            let target = sections.entry(sec).or_default();
            for (k, v) in keys {
                target.insert(k, v);
            }
        }
        Self::from_reader(&Reader { sections })
    }

    fn from_reader(r: &Reader) -> Result<Self> {
        let g = "geometry";
        let shape = match r.get(g, "shape").value.as_str() {
            "disk" => ShapeKind::Disk,
            "square" => ShapeKind::Square,
            other => return Err(Reader::invalid(g, "shape", format!("`{other}` is not disk/square"))),
        };
        let c = r.numbers(g, "center", 2)?;
        let d = r.numbers(g, "domain", 4)?;
        let domain = Rect::new(d[0], d[1], d[2], d[3]);
        if !(domain.width() > 0.0 && domain.height() > 0.0) {
            return Err(Reader::invalid(g, "domain", "empty rectangle"));
        }
        let size = r.f64(g, "size")?;
        if size < 0.0 {
            return Err(Reader::invalid(g, "size", "must be >= 0"));
        }
        let geometry = GeometryConfig {
            shape,
            center: [c[0], c[1]],
            size,
            cell_res: r.usize(g, "cell_res", 4)?,
            cells_res: r.usize(g, "cells_res", 8)?,
            macro_n: r.usize(g, "macro_n", 2)?,
            domain,
        };

        let m = "material";
        let matrix_voigt = if r.is_none(m, "matrix_voigt") {
            None
        } else {
            let v = r.numbers(m, "matrix_voigt", 9)?;
            Some(std::array::from_fn(|i| v[i]))
        };
        let material = MaterialConfig {
            matrix_lambda: r.f64(m, "matrix_lambda")?,
            matrix_mu: r.f64(m, "matrix_mu")?,
            matrix_voigt,
            inclusion_lambda: r.positive(m, "inclusion_lambda")?,
            inclusion_mu_scale: r.positive(m, "inclusion_mu_scale")?,
        };

        let s = "solver";
        let solver = SolverConfig {
            cg_tol: r.positive(s, "cg_tol")?,
            cg_max_iter: r.usize(s, "cg_max_iter", 1)?,
            minres_tol: r.positive(s, "minres_tol")?,
            eig_tol: r.positive(s, "eig_tol")?,
            deterministic: r.bool(s, "deterministic")?,
            workers: r.usize(s, "workers", 1)?,
            seed: r
                .get(s, "seed")
                .value
                .parse()
                .map_err(|_| Reader::invalid(s, "seed", "not an unsigned integer"))?,
        };

        let e = "experiment";
        let alpha = r.f64(e, "alpha")?;
        if alpha < 0.0 {
            return Err(Reader::invalid(e, "alpha", "must be >= 0"));
        }
        let pair = |key: &str| -> Result<Option<[Expr; 2]>> {
            if r.is_none(e, key) {
                return Ok(None);
            }
            let en = r.get(e, key);
            ForcingSpec::parse_pair(&en.value, en.line, en.column).map(Some)
        };
        let f1 = if r.is_none(e, "f1") {
            None
        } else {
            let en = r.get(e, "f1");
            Some(Expr::parse_at(&en.value, en.line, en.column)?)
        };
        let forcing = ForcingSpec { f0: pair("f0")?, f1, frot: pair("frot")? };
        let inverse_epsilon = r
            .list(e, "epsilon")?
            .iter()
            .map(|s| {
                parse_inverse_epsilon(s)
                    .ok_or_else(|| Reader::invalid(e, "epsilon", format!("`{s}` is not the reciprocal of an integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        let window = match r.get(e, "window").value.as_str() {
            "auto" => None,
            _ => Some(r.positive(e, "window")?),
        };
        let experiment = ExperimentConfig { alpha, forcing, inverse_epsilon, window, k: r.usize(e, "k", 1)? };
        Ok(RunConfig { geometry, material, solver, experiment })
    }

    /// Serializes every key; parsing the result gives back `self`.
    pub fn to_ini(&self) -> String {
        let g = &self.geometry;
        let m = &self.material;
        let s = &self.solver;
        let e = &self.experiment;
        let pair = |p: &Option<[Expr; 2]>| match p {
            Some([a, b]) => format!("({a}, {b})"),
            None => "none".into(),
        };
        let list = |v: &[f64]| format!("[{}]", v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", "));
        let mut out = String::new();
        out.push_str("[geometry]\n");
        out.push_str(&format!(
            "shape = {}\n",
            match g.shape {
                ShapeKind::Disk => "disk",
                ShapeKind::Square => "square",
            }
        ));
        out.push_str(&format!("center = {}\n", list(&g.center)));
        out.push_str(&format!("size = {:?}\n", g.size));
        out.push_str(&format!("cell_res = {}\ncells_res = {}\nmacro_n = {}\n", g.cell_res, g.cells_res, g.macro_n));
        out.push_str(&format!("domain = {}\n", list(&[g.domain.x0, g.domain.y0, g.domain.x1, g.domain.y1])));
        out.push_str("\n[material]\n");
        out.push_str(&format!("matrix_lambda = {:?}\nmatrix_mu = {:?}\n", m.matrix_lambda, m.matrix_mu));
        out.push_str(&format!("matrix_voigt = {}\n", m.matrix_voigt.map_or("none".into(), |v| list(&v))));
        out.push_str(&format!(
            "inclusion_lambda = {:?}\ninclusion_mu_scale = {:?}\n",
            m.inclusion_lambda, m.inclusion_mu_scale
        ));
        out.push_str("\n[solver]\n");
        out.push_str(&format!(
            "cg_tol = {:?}\ncg_max_iter = {}\nminres_tol = {:?}\neig_tol = {:?}\ndeterministic = {}\nworkers = {}\nseed = {}\n",
            s.cg_tol, s.cg_max_iter, s.minres_tol, s.eig_tol, s.deterministic, s.workers, s.seed
        ));
        out.push_str("\n[experiment]\n");
        out.push_str(&format!("alpha = {:?}\n", e.alpha));
        out.push_str(&format!("f0 = {}\n", pair(&e.forcing.f0)));
        out.push_str(&format!("f1 = {}\n", e.forcing.f1.as_ref().map_or("none".into(), |x| x.to_string())));
        out.push_str(&format!("frot = {}\n", pair(&e.forcing.frot)));
        out.push_str(&format!(
            "epsilon = [{}]\n",
            e.inverse_epsilon.iter().map(|m| format!("1/{m}")).collect::<Vec<_>>().join(", ")
        ));
        out.push_str(&format!("window = {}\n", e.window.map_or("auto".into(), |w| format!("{w:?}"))));
        out.push_str(&format!("k = {}\n", e.k));
        out
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.experiment.inverse_epsilon.iter().map(|&m| 1.0 / m as f64).collect()
    }

    pub fn inclusion(&self) -> InclusionShape {
        let g = &self.geometry;
        match g.shape {
            ShapeKind::Disk => InclusionShape::Disk { center: g.center, radius: g.size },
            ShapeKind::Square => InclusionShape::Square { center: g.center, half_width: g.size },
        }
    }

    pub fn cell_geometry(&self) -> CellGeometry {
        CellGeometry { inclusion: self.inclusion(), resolution: self.geometry.cell_res }
    }

    pub fn material_spec(&self) -> Result<MaterialSpec> {
        let m = &self.material;
        let matrix_tensor = match m.matrix_voigt {
            Some(v) => ElasticityTensor4::from_voigt(&Matrix3::from_row_slice(&v)),
            None => ElasticityTensor4::isotropic(m.matrix_lambda, m.matrix_mu),
        };
        let spec = MaterialSpec {
            matrix_tensor,
            inclusion_lambda: m.inclusion_lambda,
            inclusion_mu_scale: m.inclusion_mu_scale,
            epsilon: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn forcing(&self) -> TwoScaleForcing {
        self.experiment.forcing.to_forcing()
    }
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::parse_str(&text)
}
