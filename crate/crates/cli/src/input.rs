//! CSV and JSON ingestion.
//!
//! * Fay-Herriot: `area,y,phi,x1..xp`
//! * nested error: `group,y,x1..xp`
//! * ANOVA: a JSON design plus a CSV with a `y` column
//! * targets: `name,l1..lp,m1..mr`
//!
//! Headers are required, the delimiter is a comma and numbers use a dot
//! decimal separator.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use eblup::{build_anova, build_fay_herriot, build_nested_error, BalancedDesign, FamilyKind, MixedModel, PredictionTarget};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::CliError;

pub struct Dataset {
    pub model: MixedModel,
    pub y: DVector<f64>,
    /// Area or group labels in random-effect order, when the format has them.
    pub effect_labels: Vec<String>,
}

struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Table, CliError> {
        let file = File::open(path).map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
        let headers = rdr
            .headers()
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(CliError::input(format!("{}: no data rows", path.display())));
        }
        Ok(Table { path: path.to_path_buf(), headers, rows })
    }

    fn column(&self, name: &str) -> Result<usize, CliError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::input(format!("{}: missing column '{name}'", self.path.display())))
    }

    fn text(&self, name: &str) -> Result<Vec<String>, CliError> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[c].clone()).collect())
    }

    fn numbers_at(&self, c: usize) -> Result<Vec<f64>, CliError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    CliError::input(format!(
                        "{}: row {}, column '{}': '{}' is not a finite number",
                        self.path.display(),
                        i + 1,
                        self.headers[c],
                        r[c]
                    ))
                })
            })
            .collect()
    }

    fn numbers(&self, name: &str) -> Result<Vec<f64>, CliError> {
        self.numbers_at(self.column(name)?)
    }

    /// Columns `{prefix}1..{prefix}k` for the largest contiguous `k`.
    fn indexed(&self, prefix: &str) -> Vec<usize> {
        (1..).map_while(|j| self.headers.iter().position(|h| *h == format!("{prefix}{j}"))).collect()
    }

    fn matrix(&self, cols: &[usize]) -> Result<DMatrix<f64>, CliError> {
        let data: Vec<Vec<f64>> = cols.iter().map(|&c| self.numbers_at(c)).collect::<Result<_, _>>()?;
        Ok(DMatrix::from_fn(self.rows.len(), cols.len(), |i, j| data[j][i]))
    }

    fn covariates(&self) -> Result<DMatrix<f64>, CliError> {
        let cols = self.indexed("x");
        if cols.is_empty() {
            return Err(CliError::input(format!("{}: missing column 'x1'", self.path.display())));
        }
        self.matrix(&cols)
    }

    fn all_numeric(&self) -> Result<DMatrix<f64>, CliError> {
        self.matrix(&(0..self.headers.len()).collect::<Vec<_>>())
    }
}

pub fn read_fay_herriot(path: &Path) -> Result<Dataset, CliError> {
    let t = Table::read(path)?;
    let labels = t.text("area")?;
    let y = t.numbers("y")?;
    let phi = t.numbers("phi")?;
    let x = t.covariates()?;
    let mut model = build_fay_herriot(&phi, x)?;
    model.labels.observations = Some(labels.clone());
    model.labels.effects = Some(labels.clone());
    Ok(Dataset { model, y: DVector::from_vec(y), effect_labels: labels })
}

pub fn read_nested_error(path: &Path) -> Result<Dataset, CliError> {
    let t = Table::read(path)?;
    let raw = t.text("group")?;
    let y = t.numbers("y")?;
    let x = t.covariates()?;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let groups: Vec<usize> = raw
        .iter()
        .map(|g| {
            *index.entry(g.clone()).or_insert_with(|| {
                labels.push(g.clone());
                labels.len() - 1
            })
        })
        .collect();
    let mut model = build_nested_error(&groups, x)?;
    model.labels.effects = Some(labels.clone());
    Ok(Dataset { model, y: DVector::from_vec(y), effect_labels: labels })
}

/// ANOVA design file. Either a balanced layout (`levels`, `random`,
/// `fixed`, tuples given as 0/1 arrays) or explicit `x` and `z` CSV files,
/// resolved relative to the design file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnovaDesignFile {
    pub levels: Option<Vec<usize>>,
    pub random: Option<Vec<Vec<u8>>>,
    pub fixed: Option<Vec<u8>>,
    pub x: Option<String>,
    pub z: Option<Vec<String>>,
}

fn tuple_mask(t: &[u8], factors: usize) -> Result<u32, CliError> {
    if t.len() != factors || t.iter().any(|&b| b > 1) {
        return Err(CliError::input(format!("tuple {t:?} must have {factors} entries, each 0 or 1")));
    }
    Ok(t.iter().enumerate().fold(0, |m, (l, &b)| m | (b as u32) << l))
}

fn read_design_file(path: &Path) -> Result<AnovaDesignFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn balanced_from(spec: &AnovaDesignFile) -> Result<Option<BalancedDesign>, CliError> {
    match (&spec.levels, &spec.random, &spec.fixed) {
        (Some(levels), Some(random), Some(fixed)) => {
            let f = levels.len();
            let random = random.iter().map(|t| tuple_mask(t, f)).collect::<Result<_, _>>()?;
            Ok(Some(BalancedDesign::new(levels.clone(), random, tuple_mask(fixed, f)?)?))
        }
        (None, None, None) => Ok(None),
        _ => Err(CliError::input("balanced design needs all of 'levels', 'random' and 'fixed'")),
    }
}

pub fn read_anova(design: &Path, data: &Path) -> Result<Dataset, CliError> {
    let spec = read_design_file(design)?;
    let y = DVector::from_vec(Table::read(data)?.numbers("y")?);
    let model = match (balanced_from(&spec)?, &spec.x, &spec.z) {
        (Some(d), None, None) => d.to_model()?,
        (None, Some(x), Some(z)) => {
            let base = design.parent().unwrap_or(Path::new("."));
            let x = Table::read(&base.join(x))?.all_numeric()?;
            let blocks = z.iter().map(|p| Table::read(&base.join(p))?.all_numeric()).collect::<Result<_, _>>()?;
            build_anova(x, blocks)?
        }
        _ => {
            return Err(CliError::input(
                "design must give either 'levels'/'random'/'fixed' or explicit 'x' and 'z' files",
            ))
        }
    };
    Ok(Dataset { model, y, effect_labels: Vec::new() })
}

pub fn read_dataset(family: FamilyKind, data: &Path, design: Option<&Path>) -> Result<Dataset, CliError> {
    let ds = match family {
        FamilyKind::FayHerriot => read_fay_herriot(data)?,
        FamilyKind::NestedError => read_nested_error(data)?,
        FamilyKind::Anova => {
            let design = design.ok_or_else(|| CliError::input("anova models need --design"))?;
            read_anova(design, data)?
        }
    };
    if ds.y.len() != ds.model.n() {
        return Err(CliError::input(format!("y has {} rows but the design has {}", ds.y.len(), ds.model.n())));
    }
    Ok(ds)
}

pub struct NamedTarget {
    pub name: String,
    pub target: PredictionTarget,
}

pub fn read_targets(path: &Path, model: &MixedModel) -> Result<Vec<NamedTarget>, CliError> {
    let t = Table::read(path)?;
    let names = t.text("name")?;
    let lc = t.indexed("l");
    let mc = t.indexed("m");
    if lc.len() != model.p() {
        return Err(CliError::input(format!(
            "{}: expected columns l1..l{}, found {}",
            path.display(),
            model.p(),
            lc.len()
        )));
    }
    if mc.len() != model.r() {
        return Err(CliError::input(format!(
            "{}: expected columns m1..m{}, found {}",
            path.display(),
            model.r(),
            mc.len()
        )));
    }
    let l = t.matrix(&lc)?;
    let m = t.matrix(&mc)?;
    names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let target = PredictionTarget::new(model, l.row(i).transpose(), m.row(i).transpose())?;
            Ok(NamedTarget { name, target })
        })
        .collect()
}

/// Area-mean targets from 1-based area (group) positions.
pub fn area_targets(areas: &[usize], ds: &Dataset) -> Result<Vec<NamedTarget>, CliError> {
    areas
        .iter()
        .map(|&a| {
            if a == 0 || a > ds.model.r() {
                return Err(CliError::input(format!("--area {a} outside 1..={}", ds.model.r())));
            }
            let name = ds.effect_labels.get(a - 1).cloned().unwrap_or_else(|| format!("area-{a}"));
            Ok(NamedTarget { name, target: PredictionTarget::area_mean(&ds.model, a - 1)? })
        })
        .collect()
}
