//! Weights file: a JSON document with a schema tag, the dimension header,
//! every matrix as a list of rows, both scalers, and optional observer and
//! identification sections. Floats are written with 17 significant digits.

use std::io;
use std::path::Path;

use grumpc_core::gru::{GruModel, GruWeights, Scaler};
use grumpc_core::linalg::Matrix;
use grumpc_core::observer::{GainMode, ObserverGains};
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use crate::error::{CliError, CliResult};

pub const SCHEMA: &str = "grumpc-weights/1";

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsDoc {
    pub w_z: Rows,
    pub w_r: Rows,
    pub w_h: Rows,
    pub u_z: Rows,
    pub u_r: Rows,
    pub u_h: Rows,
    pub u_o: Rows,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
    pub b_o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverDoc {
    pub mode: GainMode,
    pub l_z: Rows,
    pub l_r: Rows,
}

/// Facts recorded at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationDoc {
    /// Largest test-split output error, normalized units.
    pub w_bar_y: f64,
    /// Test-split FIT per output channel, percent.
    pub fit: Vec<Option<f64>>,
    pub nu: f64,
    pub selected_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub schema: String,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub weights: WeightsDoc,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identification: Option<IdentificationDoc>,
}

/// Weights file contents after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub model: GruModel,
    pub observer: Option<(GainMode, ObserverGains)>,
    pub identification: Option<IdentificationDoc>,
}

fn matrix(name: &str, rows: &Rows, r: usize, c: usize) -> CliResult<Matrix> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Schema(format!("weights: {name} must be {r}×{c}")));
    }
    Matrix::from_rows(rows).map_err(|e| CliError::Schema(format!("weights: {name}: {e}")))
}

impl WeightsFile {
    pub fn from_model(model: &GruModel) -> Self {
        let w = model.params.weights();
        let (n, m, p) = (model.params.n(), model.params.m(), model.params.p());
        WeightsFile {
            schema: SCHEMA.into(),
            n,
            m,
            p,
            weights: WeightsDoc {
                w_z: w.w_z.to_rows(),
                w_r: w.w_r.to_rows(),
                w_h: w.w_h.to_rows(),
                u_z: w.u_z.to_rows(),
                u_r: w.u_r.to_rows(),
                u_h: w.u_h.to_rows(),
                u_o: w.u_o.to_rows(),
                b_z: w.b_z.clone(),
                b_r: w.b_r.clone(),
                b_h: w.b_h.clone(),
                b_o: w.b_o.clone(),
            },
            input_scaler: model.input_scaler.clone(),
            output_scaler: model.output_scaler.clone(),
            observer: None,
            identification: None,
        }
    }

    pub fn set_observer(&mut self, mode: GainMode, gains: &ObserverGains) {
        self.observer = Some(ObserverDoc {
            mode,
            l_z: gains.l_z.to_rows(),
            l_r: gains.l_r.to_rows(),
        });
    }

    pub fn to_loaded(&self) -> CliResult<LoadedModel> {
        if self.schema != SCHEMA {
            return Err(CliError::Schema(format!(
                "weights: schema is {:?}, expected {SCHEMA:?}",
                self.schema
            )));
        }
        let (n, m, p) = (self.n, self.m, self.p);
        if n == 0 || m == 0 || p == 0 {
            return Err(CliError::Schema("weights: n, m and p must be positive".into()));
        }
        let d = &self.weights;
        let vec_len = |name: &str, v: &[f64], len: usize| {
            if v.len() == len {
                Ok(v.to_vec())
            } else {
                Err(CliError::Schema(format!("weights: {name} must have {len} entries")))
            }
        };
        let w = GruWeights {
            w_z: matrix("w_z", &d.w_z, n, m)?,
            w_r: matrix("w_r", &d.w_r, n, m)?,
            w_h: matrix("w_h", &d.w_h, n, m)?,
            u_z: matrix("u_z", &d.u_z, n, n)?,
            u_r: matrix("u_r", &d.u_r, n, n)?,
            u_h: matrix("u_h", &d.u_h, n, n)?,
            u_o: matrix("u_o", &d.u_o, p, n)?,
            b_z: vec_len("b_z", &d.b_z, n)?,
            b_r: vec_len("b_r", &d.b_r, n)?,
            b_h: vec_len("b_h", &d.b_h, n)?,
            b_o: vec_len("b_o", &d.b_o, p)?,
        };
        let params = w.build().map_err(|e| CliError::Schema(format!("weights: {e}")))?;
        let model = GruModel::new(params, self.input_scaler.clone(), self.output_scaler.clone())
            .map_err(|e| CliError::Schema(format!("weights: {e}")))?;
        let observer = match &self.observer {
            None => None,
            Some(o) => {
                let gains = ObserverGains {
                    l_z: matrix("observer.l_z", &o.l_z, n, p)?,
                    l_r: matrix("observer.l_r", &o.l_r, n, p)?,
                };
                gains
                    .validate(&model.params)
                    .map_err(|e| CliError::Schema(format!("weights: observer: {e}")))?;
                Some((o.mode, gains))
            }
        };
        Ok(LoadedModel {
            model,
            observer,
            identification: self.identification.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits::default());
        self.serialize(&mut ser).expect("in-memory serialization");
        buf.push(b'\n');
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Schema(format!("weights: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}

/// Pretty JSON with every float as `d.ddddddddddddddddde±x`.
#[derive(Default)]
pub struct SigDigits {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl Formatter for SigDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn end_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_key(w)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}
