//! WebAssembly bindings for the browser playground in `www/`: train a small
//! model on the 2-D mixture task, inspect its velocity field next to the
//! exact one, and run any sampler while watching each stage.

mod session;

pub use session::{Session, Trajectory};
use wasm_bindgen::prelude::*;

fn js(e: hybridflow::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Playground {
    inner: Session,
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, width: usize, total_steps: usize) -> Result<Playground, JsError> {
        Ok(Self {
            inner: Session::new(seed.into(), width, total_steps).map_err(js)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.inner.classes()
    }

    pub fn step(&self) -> usize {
        self.inner.step()
    }

    #[wasm_bindgen(js_name = totalSteps)]
    pub fn total_steps(&self) -> usize {
        self.inner.total_steps()
    }

    /// Runs up to `steps` optimizer steps, returning their mean loss.
    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        self.inner.train(steps).map_err(js)
    }

    /// `[reflow mode, meanflow mode]` validation losses against the exact field.
    pub fn validation(&self) -> Result<Vec<f64>, JsError> {
        Ok(self.inner.validation().map_err(js)?.to_vec())
    }

    /// Flat `(x, y, u, v)` quadruples over a square lattice.
    pub fn field(&self, oracle: bool, r: f64, t: f64, class: usize, grid: usize, extent: f64) -> Result<Vec<f64>, JsError> {
        self.inner.field(oracle, r, t, class, grid, extent).map_err(js)
    }

    /// Flat `(x, y)` pairs of data from one class.
    pub fn reference(&self, n: usize, class: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        Ok(self.inner.reference(n, class, seed.into()).map_err(js)?.into_vec())
    }

    pub fn sample(&self, sampler: &str, n: usize, class: usize, seed: u32) -> Result<SampleRun, JsError> {
        Ok(SampleRun {
            inner: self.inner.sample(sampler, n, class, seed.into()).map_err(js)?,
        })
    }
}

#[wasm_bindgen]
pub struct SampleRun {
    inner: Trajectory,
}

#[wasm_bindgen]
impl SampleRun {
    pub fn labels(&self) -> Vec<String> {
        self.inner.labels.clone()
    }

    /// Stage-major flat `(x, y)` pairs, `n` per stage.
    pub fn states(&self) -> Vec<f64> {
        self.inner.states.clone()
    }

    pub fn n(&self) -> usize {
        self.inner.n
    }

    pub fn nfe(&self) -> usize {
        self.inner.nfe
    }

    #[wasm_bindgen(js_name = energyDistance)]
    pub fn energy_distance(&self) -> f64 {
        self.inner.energy_distance
    }
}
