//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so loading restores every value bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::covariance::CovFactor;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{CovarianceSet, Hyperparams, LatentFactors, ModelParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityFactor {
    pub id: String,
    pub l: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    /// Training mode, or `ground-truth` for generator output.
    pub mode: String,
    pub hyperparams: Hyperparams,
    pub aspects: Vec<String>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub l_global: Vec<Vec<f64>>,
    pub user_factors: Vec<EntityFactor>,
    pub item_factors: Vec<EntityFactor>,
}

fn matrix_from(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<Matrix> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Checkpoint(format!("{what} is not {r}x{c}")));
    }
    Matrix::from_rows(rows).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

impl Checkpoint {
    pub fn from_params(
        params: &ModelParams,
        hp: &Hyperparams,
        mode: &str,
        aspects: &[String],
        users: &[String],
        items: &[String],
    ) -> Result<Self> {
        let f = &params.factors;
        let (m, n, k, d) = (f.num_users(), f.num_items(), f.num_aspects(), f.dim());
        if aspects.len() != k || users.len() != m || items.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "ids ({}, {}, {}) do not match model ({m}, {n}, {k})",
                users.len(),
                items.len(),
                aspects.len()
            )));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("refusing to checkpoint non-finite parameters".into()));
        }
        let keyed = |ids: &[String], ls: &[CovFactor]| {
            ids.iter().zip(ls).map(|(id, l)| EntityFactor { id: id.clone(), l: l.matrix().to_rows() }).collect()
        };
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            m,
            n,
            k,
            d,
            mode: mode.to_string(),
            hyperparams: hp.clone(),
            aspects: aspects.to_vec(),
            u: f.u.to_rows(),
            v: f.v.to_rows(),
            w: f.w.to_rows(),
            l_global: params.covs.global.matrix().to_rows(),
            user_factors: keyed(users, &params.covs.users),
            item_factors: keyed(items, &params.covs.items),
        })
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format_version {}", self.format_version)));
        }
        let (m, n, k, d) = (self.m, self.n, self.k, self.d);
        if self.aspects.len() != k || self.user_factors.len() != m || self.item_factors.len() != n {
            return Err(Error::Checkpoint("entity or aspect count disagrees with header".into()));
        }
        let factors = LatentFactors::new(
            matrix_from(&self.u, m, d, "U")?,
            matrix_from(&self.v, n, d, "V")?,
            matrix_from(&self.w, k, d, "W")?,
        )?;
        let cov = |rows: &[Vec<f64>], what: &str| CovFactor::new(matrix_from(rows, k, k, what)?);
        let covs = CovarianceSet {
            global: cov(&self.l_global, "L_G")?,
            users: self.user_factors.iter().map(|e| cov(&e.l, &e.id)).collect::<Result<_>>()?,
            items: self.item_factors.iter().map(|e| cov(&e.l, &e.id)).collect::<Result<_>>()?,
        };
        Ok(ModelParams { factors, covs })
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.user_factors.iter().map(|e| e.id.clone()).collect()
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.item_factors.iter().map(|e| e.id.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Writes through a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Replaces `path` with `bytes` so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
