//! Surrogate conditions: label assignment, teacher training, pseudo-labelled
//! synthetic data and time-dependent distillation.

pub mod distill;
pub mod labels;
pub mod network;
pub mod teacher;

pub use distill::{distill, distillation_loss_with, fidelity_at, DistillConfig, DistillReport};
pub use labels::{
    assign_labels, check_informative, kmeans, project_principal, KMeans, LabelAssignment,
    LabelKind, LabelSource,
};
pub use network::{argmax, kl_divergence, log_softmax, softmax_rows, Classifier};
pub use teacher::{
    accuracy, cross_entropy, generate_pseudo_dataset, label_samples, train_teacher,
    PseudoDataset, TeacherReport,
};
