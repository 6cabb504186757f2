"""設定載入與驗證。"""
