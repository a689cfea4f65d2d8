fn main() {
    // Subcommands land here as the library fills out.
}
