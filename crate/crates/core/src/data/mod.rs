//! Tabular loading, encoding and client partitioning.

mod csv_io;
mod encode;
mod partition;
mod schema;
mod synth;

pub use csv_io::{load_csv_dataset, read_csv_dataset, RawDataset};
pub use encode::{encode_features, Dataset, Encoder};
pub use partition::{
    batch_iter, partition_clients, partition_indices, train_test_split, BatchIter, ClientDataset,
    PartitionStrategy,
};
pub use schema::{ColumnKind, ColumnSpec, DataSchema, OtherGroups};
pub use synth::{generate_synthetic, synthetic_schema, write_csv, SynthConfig, SYNTH_FEATURES};
