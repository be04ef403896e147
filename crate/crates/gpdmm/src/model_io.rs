//! The versioned model document: a `GPDMM1` header line followed by JSON.

use std::fs;
use std::path::Path;

use gpdmm_core::TrainedGpdmm;

use crate::error::{AppError, AppResult};

pub const MODEL_HEADER: &str = "GPDMM1";

pub fn model_to_string(model: &TrainedGpdmm) -> String {
    let body = serde_json::to_string(model).expect("model serializes");
    format!("{MODEL_HEADER}\n{body}\n")
}

pub fn model_from_str(text: &str) -> Result<TrainedGpdmm, String> {
    let (header, body) = text.split_once('\n').ok_or("missing header line")?;
    if header.trim_end() != MODEL_HEADER {
        return Err(format!("unsupported model header `{header}`, expected `{MODEL_HEADER}`"));
    }
    serde_json::from_str(body).map_err(|e| e.to_string())
}

pub fn save_model(model: &TrainedGpdmm, path: &Path) -> AppResult<()> {
    fs::write(path, model_to_string(model)).map_err(|e| AppError::io(path, e))
}

pub fn load_model(path: &Path) -> AppResult<TrainedGpdmm> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    model_from_str(&text).map_err(|m| AppError::data(path, m))
}
