//! Network JSON format.
//!
//! ```json
//! {
//!   "input_dim": 2,
//!   "output_dim": 2,
//!   "input_box": [[0.0, 1.0], [0.0, 1.0]],
//!   "layers": [
//!     {"weight": [[1.0, 0.0], [0.0, 1.0]], "bias": [0.0, 0.0], "origin": "dense"}
//!   ]
//! }
//! ```
//!
//! Weights are row-major nested arrays. The loader rejects shape-inconsistent
//! files with an error naming the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Layer, Network};

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    input_dim: usize,
    output_dim: usize,
    /// Defaults to `[0,1]^d` when omitted.
    #[serde(default)]
    input_box: Option<Vec<(f64, f64)>>,
    layers: Vec<Layer>,
}

impl Network {
    /// Parse a network from its JSON representation.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)?;
        for (i, layer) in file.layers.iter().enumerate() {
            if layer.weight.rows() != layer.bias.len() {
                return Err(Error::file(
                    format!("layers[{i}].bias"),
                    format!(
                        "{} entries but weight has {} rows",
                        layer.bias.len(),
                        layer.weight.rows()
                    ),
                ));
            }
            if i > 0 && layer.weight.cols() != file.layers[i - 1].weight.rows() {
                return Err(Error::file(
                    format!("layers[{i}].weight"),
                    format!(
                        "{} columns but layers[{}] produces {} outputs",
                        layer.weight.cols(),
                        i - 1,
                        file.layers[i - 1].weight.rows()
                    ),
                ));
            }
        }
        match file.layers.first() {
            None => return Err(Error::file("layers", "must contain at least one layer")),
            Some(first) if first.weight.cols() != file.input_dim => {
                return Err(Error::file(
                    "input_dim",
                    format!(
                        "{} but layers[0].weight has {} columns",
                        file.input_dim,
                        first.weight.cols()
                    ),
                ));
            }
            _ => {}
        }
        let last_rows = file.layers.last().unwrap().weight.rows();
        if last_rows != file.output_dim {
            return Err(Error::file(
                "output_dim",
                format!("{} but the final layer produces {last_rows} outputs", file.output_dim),
            ));
        }
        let input_box = file
            .input_box
            .unwrap_or_else(|| vec![(0.0, 1.0); file.input_dim]);
        if input_box.len() != file.input_dim {
            return Err(Error::file(
                "input_box",
                format!(
                    "{} coordinates but input_dim is {}",
                    input_box.len(),
                    file.input_dim
                ),
            ));
        }
        Network::with_input_box(file.layers, input_box)
    }

    /// Read a network from a JSON file.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::file(path.display().to_string(), e.to_string())
        })?;
        Network::from_json(&text).map_err(|e| match e {
            Error::FileFormat { location, message } => Error::FileFormat {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }

    /// Serialize to the JSON format above.
    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            input_box: Some(self.input_box.clone()),
            layers: self.layers.clone(),
        };
        serde_json::to_string_pretty(&file).expect("network serialization cannot fail")
    }

    /// Write the JSON form to a file.
    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
