// C ABI surface; filled in once the core library lands.
