from ipabn.cli import main

raise SystemExit(main())
