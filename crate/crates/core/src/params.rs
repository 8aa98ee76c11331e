//! Named views over model tensors, shared by the optimizer, checkpoints and
//! gradient checks.

use crate::linalg::Matrix;

pub struct ParamRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [f64],
}

impl<'a> ParamRef<'a> {
    pub fn matrix(name: impl Into<String>, m: &'a Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &'a [f64]) -> Self {
        Self {
            name: name.into(),
            dims: vec![v.len()],
            data: v,
        }
    }

    pub fn scalar(name: impl Into<String>, v: &'a f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![],
            data: std::slice::from_ref(v),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }
}

impl<'a> ParamMut<'a> {
    pub fn matrix(name: impl Into<String>, m: &'a mut Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.as_mut_slice(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &'a mut [f64]) -> Self {
        let dims = vec![v.len()];
        Self {
            name: name.into(),
            dims,
            data: v,
        }
    }

    pub fn scalar(name: impl Into<String>, v: &'a mut f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![],
            data: std::slice::from_mut(v),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }
}

pub fn prefixed<'a>(
    prefix: &'static str,
    params: Vec<ParamRef<'a>>,
) -> impl Iterator<Item = ParamRef<'a>> {
    params.into_iter().map(move |mut p| {
        p.name = format!("{prefix}{}", p.name);
        p
    })
}

pub fn prefixed_mut<'a>(
    prefix: &'static str,
    params: Vec<ParamMut<'a>>,
) -> impl Iterator<Item = ParamMut<'a>> {
    params.into_iter().map(move |mut p| {
        p.name = format!("{prefix}{}", p.name);
        p
    })
}
