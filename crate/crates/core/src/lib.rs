//! Chain-of-restoration toolkit.
//!
//! An image carrying several degradations at once is restored by repeatedly
//! asking a discriminator which degradation basis to remove next, removing it
//! with a single-basis restorer, and stopping once the discriminator reports a
//! clean image. The crate provides every piece of that loop:
//!
//! * [`image`] and [`metrics`]: the float raster type, PNG I/O and PSNR/SSIM.
//! * [`labels`]: the algebra of degradation labels (combination, permutation
//!   equality, exact-cover decomposition over a basis set).
//! * [`complexity`]: exact training and inference cost ratios of k-order models.
//! * [`synthesis`]: seeded, exactly invertible degradation operators and the
//!   dataset builder.
//! * [`restorers`]: oracle inverses and classical blind restorers.
//! * [`discriminator`]: handcrafted features, softmax classifier, patch voting
//!   and soft-margin basis selection.
//! * [`chain`]: the restoration loop itself.

pub mod chain;
pub mod complexity;
pub mod discriminator;
pub mod error;
pub mod filters;
pub mod image;
pub mod labels;
pub mod metrics;
pub mod restorers;
pub mod seed;
pub mod synthesis;

pub use error::{CorError, Result};
pub use image::Image;
pub use labels::{BasisSet, BasisSymbol, DegradationLabel};
