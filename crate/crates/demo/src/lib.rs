//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns plain strings (JSON for structured
//! results) so the page needs no bundler.

pub mod ops;

use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(value: &impl serde::Serialize) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(js_err)
}

/// `silos_json` is `[{"n": 3, "values": [..]}, ...]`; returns the weights
/// and the aggregated vector.
#[wasm_bindgen]
pub fn aggregate(silos_json: &str) -> Result<String, JsError> {
    let silos: Vec<ops::SiloInput> = serde_json::from_str(silos_json).map_err(js_err)?;
    to_json(&ops::aggregate(&silos).map_err(js_err)?)
}

/// Span precision, recall and F1 of predicted against gold IOB tags.
#[wasm_bindgen]
pub fn score_iob(gold: &str, predicted: &str) -> Result<String, JsError> {
    to_json(&ops::score_iob(gold, predicted).map_err(js_err)?)
}

#[wasm_bindgen]
pub struct AttentionLab {
    inner: ops::Lab,
}

#[wasm_bindgen]
impl AttentionLab {
    /// An untrained encoder.
    pub fn random(seed: u32) -> Result<AttentionLab, JsError> {
        Ok(Self {
            inner: ops::Lab::random(seed.into()).map_err(js_err)?,
        })
    }

    /// A model produced by the `fedbert` runner.
    #[wasm_bindgen(js_name = fromRun)]
    pub fn from_run(
        config_json: &str,
        vocab_txt: &str,
        checkpoint: &[u8],
    ) -> Result<AttentionLab, JsError> {
        Ok(Self {
            inner: ops::Lab::from_run(config_json, vocab_txt, checkpoint).map_err(js_err)?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn source(&self) -> String {
        self.inner.source.clone()
    }

    /// Attention maps, head entropies, head JSD and the MDS layout for one
    /// sentence.
    pub fn analyze(&self, text: &str) -> Result<String, JsError> {
        to_json(&self.inner.analyze(text).map_err(js_err)?)
    }
}
