use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter blocks, stored in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

/// Flat, serializable form of one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_array(name: &str, a: &Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>, NnError> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|_| NnError::Shape(format!("tensor {} has {} values for shape {:?}", self.name, self.data.len(), self.shape)))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter block {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| NamedTensor::from_array(n, v))
            .collect()
    }

    /// Overwrites every block from `tensors`; names and shapes must match exactly.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), NnError> {
        if tensors.len() != self.values.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameter blocks, found {}",
                self.values.len(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.name != self.names[i] {
                return Err(NnError::Shape(format!("block {i} is {}, expected {}", t.name, self.names[i])));
            }
            let a = t.to_array()?;
            if a.dim() != self.values[i].dim() {
                return Err(NnError::Shape(format!(
                    "block {} has shape {:?}, expected {:?}",
                    t.name,
                    a.dim(),
                    self.values[i].dim()
                )));
            }
            self.values[i] = a;
        }
        Ok(())
    }
}
