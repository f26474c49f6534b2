//! Seeded generation of teachers, datasets and students, and their
//! on-disk formats.

pub mod io;
pub mod rng;
mod teacher;

pub use io::{artifact_paths, load_dataset, load_net, save_dataset, save_net, sha256_hex, DatasetManifest, NetManifest, FORMAT_VERSION};
pub use rng::{gaussian_matrix, Stream};
pub use teacher::{
    embed_teacher, init_student, make_teacher_dataset, Dataset, TeacherSpec, DEFAULT_N_TEST, DEFAULT_N_TRAIN,
    DEFAULT_STUDENT_WIDTH, STREAM_STUDENT_U, STREAM_TEACHER_U, STREAM_TEACHER_V, STREAM_TEST, STREAM_TRAIN,
    TEACHER_SCALING,
};
