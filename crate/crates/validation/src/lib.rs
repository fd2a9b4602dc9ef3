//! Home of the `acceptance` test target; the crate itself is empty.
