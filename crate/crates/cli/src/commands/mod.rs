pub mod bench;
pub mod gradcheck;
pub mod paramcount;
pub mod tp_check;
pub mod train;
