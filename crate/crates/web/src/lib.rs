//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export takes and returns JSON strings. The plain Rust functions in
//! [`api`] do the work so they can be tested natively.

use wasm_bindgen::prelude::*;

pub mod api;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Groups layers by their mean cosines and reallocates `b_init`.
#[wasm_bindgen(js_name = planBudgets)]
pub fn plan_budgets(cosines_json: &str, b_init: usize, squeeze_ratio: f64) -> Result<String, JsValue> {
    js(api::plan_budgets(cosines_json, b_init, squeeze_ratio))
}

/// Applies one eviction to a cache described as `[{position, score}]`.
#[wasm_bindgen(js_name = evictDemo)]
pub fn evict_demo(policy_json: &str, entries_json: &str, budget: usize) -> Result<String, JsValue> {
    js(api::evict_demo(policy_json, entries_json, budget))
}

/// Toy-model decode in full, uniform and squeeze modes.
#[wasm_bindgen(js_name = memoryCurves)]
pub fn memory_curves(request_json: &str) -> Result<String, JsValue> {
    js(api::memory_curves(request_json))
}
