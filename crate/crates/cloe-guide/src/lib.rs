//! Runs the book's code snippets as doctests. Chapters live in `book/src/`;
//! each module below includes one chapter so `cargo test -p cloe-guide --doc`
//! keeps the guide honest.
