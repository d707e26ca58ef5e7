//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly and records the rule needed to push an upstream gradient back to
//! its inputs. Because nodes can only reference nodes created before them,
//! creation order is already a topological order, and [`Graph::backward`]
//! walks it in reverse.
//!
//! All values are 2-D (`rows x cols`); scalars are `1 x 1`, vectors are a
//! single row or column. Higher-rank data (per-point vector channels, for
//! instance) is stored flattened along the column axis.
//!
//! ```
//! use gradgraph::{Graph, Tensor};
//! use ndarray::array;
//!
//! let mut g = Graph::new();
//! let w = g.param("w", array![[1.0, -2.0]]);
//! let x = g.constant(array![[3.0], [4.0]]);
//! let y = g.matmul(w, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.param("w").unwrap(), &array![[3.0, 4.0]]);
//! # let _: &Tensor = g.value(y);
//! ```

mod check;
mod error;
mod graph;
mod params;

pub use check::{central_difference, gradcheck, relative_error};
pub use error::{GraphError, Result};
pub use graph::{CustomFunction, CustomPrimitive, Gradients, Graph, NodeId, Traversal};
pub use params::ParamStore;

/// Dense matrix type used for every node value.
pub type Tensor = ndarray::Array2<f64>;
