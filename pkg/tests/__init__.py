# datampc test suite
