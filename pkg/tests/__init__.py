# Tests package for endonoise
