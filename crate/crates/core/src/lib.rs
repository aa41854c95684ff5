//! Spiking error-modulated STDP: integer neuron models, the tagged local
//! learning rule, the two-phase dual-path network, a core mapper and a
//! floating-point reference model.

/// `Display` and case-insensitive `FromStr` for a fieldless enum.
macro_rules! named_enum {
    ($ty:ty, $what:literal, { $($var:path => $name:literal),+ $(,)? }) => {
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self {
                    $($var => $name,)+
                })
            }
        }

        impl std::str::FromStr for $ty {
            type Err = crate::error::Error;

            fn from_str(s: &str) -> crate::error::Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($var),)+
                    _ => Err(crate::error::Error::Config(format!("unknown {} {s:?}", $what))),
                }
            }
        }
    };
}

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod mapper;
pub mod net;
pub mod neuron;
pub mod oracle;
pub mod plasticity;

pub use error::{Error, Result};
