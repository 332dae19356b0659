pub mod best_response;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod ibr;
pub mod nlp;
pub mod scenario;
pub mod simulate;
pub mod sls;
pub mod tightening;

pub use error::{Error, Result};

// The guide's snippets run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/system_responses.md")]
    mod system_responses {}
    #[doc = include_str!("../../../book/src/tightening.md")]
    mod tightening {}
    #[doc = include_str!("../../../book/src/games.md")]
    mod games {}
    #[doc = include_str!("../../../book/src/ibr.md")]
    mod ibr {}
    #[doc = include_str!("../../../book/src/monte_carlo.md")]
    mod monte_carlo {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
