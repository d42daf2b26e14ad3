pub mod cluemetrics;
pub mod corpus;
pub mod datasetio;
pub mod fetch;
pub mod geotile;
pub mod inference;
pub mod sources;
pub mod taxonomy;
