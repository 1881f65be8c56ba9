//! Shared fixtures for the pipeline benchmarks.

use rkhs_calib_core::model::{builtin, sample_physical};
use rkhs_calib_core::{Kernel, PhysicalDataset};

pub fn setting1_data(n: usize) -> (PhysicalDataset, Kernel) {
    let (_, setting) = builtin(1).expect("setting 1");
    let data = sample_physical(&setting, n, 42);
    let kernel = Kernel::sobolev_cubic(setting.domain.0, setting.domain.1).expect("kernel");
    (data, kernel)
}
