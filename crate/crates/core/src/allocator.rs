//! Joint prompt/model budget allocation.
